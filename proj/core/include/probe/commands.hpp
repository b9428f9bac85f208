#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "probe/config.hpp"
#include "probe/detect.hpp"
#include "probe/evalkit.hpp"
#include "probe/pretrain.hpp"

namespace probe::cli {

// Library-level command implementations; the binary in tools/ is a thin
// argv adapter. Every command creates its run directory, echoes the
// fully-resolved config, and is deterministic given (config, seed).

struct GenResult {
    std::string source_path;
    std::string target_path;
    std::string manifest_path;
};
GenResult cmd_gen(const RunConfig& cfg, const std::string& out_dir);

struct ClusterResult {
    std::string csv_path;
    double total_inertia = 0.0;
    double best_purity = 0.0;  // over clusters with at least 5 members
};
ClusterResult cmd_cluster(const RunConfig& cfg, const std::string& out_dir);

struct PretrainCmdResult {
    std::string checkpoint_path;
    std::string csv_path;
    std::string plot_path;
    std::vector<pretrain::MetricsRow> rows;
};
PretrainCmdResult cmd_pretrain(const RunConfig& cfg, const std::string& out_dir,
                               bool resume = false);

struct TrainHeadCmdResult {
    std::string checkpoint_path;
    std::string csv_path;
    std::vector<detect::HeadMetricsRow> rows;
    std::size_t scenes_used = 0;
    std::size_t target_scenes_used = 0;
};
// source_only trains a random-headed, prompt-free model straight from the
// config; otherwise paths.checkpoint supplies the pretrained model.
TrainHeadCmdResult cmd_train_head(const RunConfig& cfg, const std::string& out_dir,
                                  double few_shot_fraction = 0.0, bool source_only = false);

struct EvalCmdResult {
    std::string metrics_csv;
    std::string summary_csv;
    std::string predictions_csv;
    std::string corruption_csv;  // empty unless with_corruptions
    std::string corruption_plot;
    evalkit::MapSuiteResult clean;
};
EvalCmdResult cmd_eval(const RunConfig& cfg, const std::string& out_dir,
                       bool with_corruptions = false);

struct FewShotRow {
    double fraction = 0.0;
    double map50 = 0.0;
    double map5095 = 0.0;
};
struct FewShotCmdResult {
    std::string csv_path;
    std::string plot_path;
    std::vector<FewShotRow> rows;
};
FewShotCmdResult cmd_fewshot(const RunConfig& cfg, const std::string& out_dir);

struct AblateCellRow {
    std::string sweep;
    std::string label;
    double map50 = 0.0;
    double map5095 = 0.0;
    std::string status;  // "ok" or the error message
};
struct AblateCmdResult {
    std::vector<AblateCellRow> rows;
    std::vector<std::string> csv_paths;
};
// sweep: "k", "depth", "lambda" or "all". Cells fail independently.
AblateCmdResult cmd_ablate(const RunConfig& cfg, const std::string& out_dir,
                           const std::string& sweep = "all");

}  // namespace probe::cli
