#include "probe/model.hpp"

#include "probe/rng.hpp"

namespace probe {

ModelState make_model(const ModelOptions& opt) {
    ModelState m;
    m.opt = opt;
    m.encoder = std::make_shared<backbone::Encoder>(opt.backbone_cfg, opt.master_seed);
    const int d = opt.backbone_cfg.embed_dim;
    m.ssl = pretrain::SslHeads::init(d, opt.ssl_dim, derive_seed(opt.master_seed, "ssl_heads"));
    m.align_head = dapa::AlignmentHead::init(d, opt.dapa_cfg, opt.master_seed);
    return m;
}

spem::AssignmentMap assign_images(const spem::PcaModel& pca, const Matrix& centroids,
                                  const backbone::Encoder& encoder,
                                  const std::vector<datagen::LabeledScene>& images) {
    const Matrix embeddings = spem::harvest_patch_embeddings(encoder, images);
    const Matrix reduced = pca.project(embeddings);
    const auto n = static_cast<std::size_t>(encoder.config().num_tokens());

    spem::AssignmentMap map;
    map.num_clusters = static_cast<int>(centroids.rows);
    map.per_image.resize(images.size());
    map.histograms.assign(images.size(), std::vector<double>(centroids.rows, 0.0));
    for (std::size_t i = 0; i < images.size(); ++i) {
        map.per_image[i].resize(n);
        for (std::size_t p = 0; p < n; ++p) {
            const double* pt = reduced.row(i * n + p);
            std::size_t best = 0;
            double best_d = squared_distance(centroids.row(0), pt, centroids.cols);
            for (std::size_t c = 1; c < centroids.rows; ++c) {
                const double dd = squared_distance(centroids.row(c), pt, centroids.cols);
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            map.per_image[i][p] = static_cast<int>(best);
            map.histograms[i][best] += 1.0;
        }
    }
    return map;
}

}  // namespace probe
