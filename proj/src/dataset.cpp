#include "sb/dataset.hpp"

namespace sb {

Dataset build_slice_dataset(const std::string& root, const SplitManifest& manifest, Purpose purpose,
                            double rejection_threshold) {
    Dataset ds;
    ds.rank = 2;
    for (const auto& id : manifest.split(purpose)) {
        Volume v = load_subject(root, id);
        Volume norm = zscore_normalize(v);
        norm.mask = v.mask;
        norm.subject_id = v.subject_id;
        for (auto& s : slice_axial(norm, purpose, rejection_threshold)) {
            Grid2D g{s.rows, s.cols, std::move(s.image)};
            Grid2D img = crop_resize_image(g);
            Sample out;
            out.id = s.subject_id + "_z" + std::to_string(s.slice_index);
            out.extents = {kSliceSize, kSliceSize};
            out.image.assign(img.v.begin(), img.v.end());
            out.mask = crop_resize_mask(s.rows, s.cols, s.mask);
            out.spacing = v.spacing;
            ds.samples.push_back(std::move(out));
        }
    }
    return ds;
}

Dataset build_volume_dataset(const std::string& root, const SplitManifest& manifest, Purpose purpose,
                             const std::array<int64_t, 3>& target) {
    Dataset ds;
    ds.rank = 3;
    for (const auto& id : manifest.split(purpose)) {
        Volume v = load_subject(root, id);
        Volume norm = zscore_normalize(v);
        norm.mask = v.mask;
        norm.subject_id = v.subject_id;
        Volume r = resample_3d(norm, target);
        Sample out;
        out.id = id;
        out.extents = {r.extents[0], r.extents[1], r.extents[2]};
        out.image.assign(r.intensity.begin(), r.intensity.end());
        out.mask = std::move(r.mask);
        out.spacing = r.spacing;
        ds.samples.push_back(std::move(out));
    }
    return ds;
}

}  // namespace sb
