#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "probe/datagen.hpp"
#include "probe/detect.hpp"
#include "probe/model.hpp"
#include "probe/pretrain.hpp"

namespace probe::cli {

// Flat dotted-key configuration. Every knob of every module lives here;
// unknown keys are rejected and the fully-resolved set is echoed into each
// run directory. Values are stored as text and parsed on access.
class RunConfig {
public:
    static RunConfig defaults();
    static RunConfig from_file(const std::string& path);
    static RunConfig from_string(const std::string& text, const std::string& origin = "<string>");

    void set(const std::string& key, const std::string& value);
    void apply_override(const std::string& key_eq_value);  // "key=value"

    const std::string& get(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const;
    std::vector<std::string> get_string_list(const std::string& key) const;

    std::string serialize() const;  // sorted "key = value" lines
    void write_file(const std::string& path) const;

    // -- derived module option bundles
    std::uint64_t master_seed() const { return get_u64("run.seed"); }
    backbone::Config backbone_config() const;
    spem::SpemConfig spem_config() const;
    dapa::DapaConfig dapa_config() const;
    ModelOptions model_options() const;
    pretrain::PretrainOptions pretrain_options() const;
    detect::TrainHeadOptions train_head_options() const;
    datagen::DomainSpec source_spec() const;
    datagen::PairOptions pair_options() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace probe::cli
