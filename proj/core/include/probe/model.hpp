#pragma once

#include <memory>
#include <optional>

#include "probe/backbone.hpp"
#include "probe/dapa.hpp"
#include "probe/detect.hpp"
#include "probe/pretrain.hpp"
#include "probe/spem.hpp"

namespace probe {

struct ModelOptions {
    backbone::Config backbone_cfg;
    spem::SpemConfig spem_cfg;
    dapa::DapaConfig dapa_cfg;
    int ssl_dim = 0;  // 0 -> embed_dim
    std::uint64_t master_seed = 0;
};

// Frozen encoder plus every trainable module and its lifecycle state.
struct ModelState {
    ModelOptions opt;
    std::shared_ptr<backbone::Encoder> encoder;
    std::optional<spem::PcaModel> pca;
    std::optional<spem::PromptBank> bank;
    spem::AssignmentMap assignments;
    pretrain::SslHeads ssl;
    dapa::AlignmentHead align_head;
    std::optional<detect::DetectionHead> det_head;
    int pretrained_epochs = 0;

    num::TensorPtr prompt_cache() const { return bank ? bank->prompts_cache : nullptr; }
};

ModelState make_model(const ModelOptions& opt);

// Nearest-centroid assignments of every patch of every image in the bank's
// reduced space; used to rebuild the assignment map after loading.
spem::AssignmentMap assign_images(const spem::PcaModel& pca, const Matrix& centroids,
                                  const backbone::Encoder& encoder,
                                  const std::vector<datagen::LabeledScene>& images);

}  // namespace probe
