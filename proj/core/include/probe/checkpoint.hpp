#pragma once

#include <optional>
#include <string>

#include "probe/config.hpp"
#include "probe/model.hpp"
#include "probe/optim.hpp"

namespace probe::cli {

// Binary checkpoint: magic, format version, master seed, config snapshot,
// epoch counter, then named sections of shape-tagged float64 buffers
// (backbone, pca, prompt_bank, ssl_heads, dapa_head, det_head, optimizer).
// Layout documented in docs/formats.md. save -> load -> save is
// byte-identical; a version mismatch is rejected.

struct LoadedCheckpoint {
    RunConfig config;
    ModelState model;
    pretrain::OptimizerSnapshot optimizer;
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, const ModelState& model,
                     const pretrain::OptimizerSnapshot* optimizer = nullptr);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace probe::cli
