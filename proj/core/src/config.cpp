#include "probe/config.hpp"

#include <fstream>
#include <sstream>

namespace probe::cli {

namespace {

const std::map<std::string, std::string>& default_values() {
    static const std::map<std::string, std::string> defaults = {
        {"run.seed", "0"},

        {"paths.source", "source.ds"},
        {"paths.target", "target.ds"},
        {"paths.eval", "eval_target.ds"},
        {"paths.checkpoint", "checkpoint.bin"},

        {"backbone.image_size", "64"},
        {"backbone.patch_size", "8"},
        {"backbone.embed_dim", "64"},
        {"backbone.layers", "6"},
        {"backbone.heads", "4"},
        {"backbone.mlp_ratio", "4.0"},
        {"backbone.injection_layers", "0,3"},
        {"backbone.channels", "1"},
        {"backbone.init_std", "0.02"},
        {"backbone.posenc_scale", "0.25"},

        {"spem.enabled", "true"},
        {"spem.reduced_dim", "16"},
        {"spem.num_prototypes", "10"},
        {"spem.hidden_dim", "0"},
        {"spem.temperature", "0.1"},
        {"spem.kmeans_max_iter", "300"},
        {"spem.kmeans_n_init", "10"},
        {"spem.refresh_interval", "0"},

        {"dapa.enabled", "true"},
        {"dapa.align_dim", "0"},
        {"dapa.identity", "false"},

        {"pretrain.lambda_prompt", "1.0"},
        {"pretrain.lambda_dapa", "0.5"},
        {"pretrain.lr", "3e-4"},
        {"pretrain.weight_decay", "1e-4"},
        {"pretrain.beta1", "0.9"},
        {"pretrain.beta2", "0.999"},
        {"pretrain.eps", "1e-8"},
        {"pretrain.warmup_epochs", "10"},
        {"pretrain.epochs", "30"},
        {"pretrain.batch_size", "8"},
        {"pretrain.images_per_domain", "0"},
        {"pretrain.ssl_dim", "0"},
        {"pretrain.checkpoint_interval", "10"},

        {"augment.crop_min_scale", "0.6"},
        {"augment.crop_max_scale", "1.0"},
        {"augment.flip_prob", "0.5"},
        {"augment.brightness", "0.15"},
        {"augment.contrast", "0.15"},
        {"augment.noise_sigma", "0.02"},

        {"head.epochs", "20"},
        {"head.lr", "1e-4"},
        {"head.weight_decay", "1e-4"},
        {"head.batch_size", "8"},
        {"head.mid1", "0"},
        {"head.mid2", "0"},
        {"head.focal_alpha", "0.25"},
        {"head.focal_gamma", "2.0"},

        {"detect.conf_threshold", "0.05"},
        {"detect.nms_iou", "0.5"},

        {"data.n_per_domain", "192"},
        {"data.shift_knob", "0.7"},
        {"data.defects_min", "1"},
        {"data.defects_max", "3"},
        {"data.texture_freq", "3.0"},
        {"data.base_brightness", "0.65"},
        {"data.contrast", "0.12"},
        {"data.noise_sigma", "0.02"},
        {"data.defect_contrast", "0.35"},
        {"data.crack_width_min", "1.5"},
        {"data.crack_width_max", "3.0"},
        {"data.pothole_radius_min", "4.0"},
        {"data.pothole_radius_max", "9.0"},

        {"eval.max_dets_per_image", "100"},
        {"eval.seeds", "0"},

        {"fewshot.fractions", "0,0.05,0.25"},

        {"ablate.k_values", "1,5,10,15"},
        {"ablate.depths", "shallow,mid,shallow_mid"},
        {"ablate.lambda1_values", "0.1,1.0,2.0"},
        {"ablate.lambda2_values", "0.1,0.5,1.0"},
    };
    return defaults;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.values_ = default_values();
    return c;
}

RunConfig RunConfig::from_string(const std::string& text, const std::string& origin) {
    RunConfig c = defaults();
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(origin + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            c.set(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_string(ss.str(), path);
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!default_values().count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
}

void RunConfig::apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + kv + "' is not of the form key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

int RunConfig::get_int(const std::string& key) const {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(get(key), &pos);
        if (pos != get(key).size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + get(key) + "'");
    }
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(get(key), &pos);
        if (pos != get(key).size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + get(key) +
                          "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    try {
        std::size_t pos = 0;
        const double v = std::stod(get(key), &pos);
        if (pos != get(key).size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + get(key) + "'");
    }
}

std::vector<std::string> RunConfig::get_string_list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream in(get(key));
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
    std::vector<int> out;
    for (const std::string& s : get_string_list(key)) {
        try {
            out.push_back(std::stoi(s));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': bad integer '" + s + "'");
        }
    }
    return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& s : get_string_list(key)) {
        try {
            out.push_back(std::stod(s));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': bad number '" + s + "'");
        }
    }
    return out;
}

std::string RunConfig::serialize() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
}

void RunConfig::write_file(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("config: cannot write " + path);
    out << serialize();
}

backbone::Config RunConfig::backbone_config() const {
    backbone::Config c;
    c.image_size = get_int("backbone.image_size");
    c.patch_size = get_int("backbone.patch_size");
    c.embed_dim = get_int("backbone.embed_dim");
    c.num_layers = get_int("backbone.layers");
    c.num_heads = get_int("backbone.heads");
    c.mlp_ratio = get_double("backbone.mlp_ratio");
    c.injection_layers.clear();
    for (int l : get_int_list("backbone.injection_layers")) c.injection_layers.insert(l);
    c.channels = get_int("backbone.channels");
    c.init_std = get_double("backbone.init_std");
    c.posenc_scale = get_double("backbone.posenc_scale");
    c.validate();
    return c;
}

spem::SpemConfig RunConfig::spem_config() const {
    spem::SpemConfig c;
    c.reduced_dim = get_int("spem.reduced_dim");
    c.num_prototypes = get_int("spem.num_prototypes");
    c.hidden_dim = get_int("spem.hidden_dim");
    c.temperature = get_double("spem.temperature");
    c.kmeans_max_iter = get_int("spem.kmeans_max_iter");
    c.kmeans_n_init = get_int("spem.kmeans_n_init");
    c.refresh_interval = get_int("spem.refresh_interval");
    return c;
}

dapa::DapaConfig RunConfig::dapa_config() const {
    dapa::DapaConfig c;
    c.align_dim = get_int("dapa.align_dim");
    c.identity = get_bool("dapa.identity");
    return c;
}

ModelOptions RunConfig::model_options() const {
    ModelOptions m;
    m.backbone_cfg = backbone_config();
    m.spem_cfg = spem_config();
    m.dapa_cfg = dapa_config();
    m.ssl_dim = get_int("pretrain.ssl_dim");
    m.master_seed = master_seed();
    return m;
}

pretrain::PretrainOptions RunConfig::pretrain_options() const {
    pretrain::PretrainOptions o;
    o.weights.lambda1 = get_bool("spem.enabled") ? get_double("pretrain.lambda_prompt") : 0.0;
    o.weights.lambda2 = get_bool("dapa.enabled") ? get_double("pretrain.lambda_dapa") : 0.0;
    o.schedule.base_lr = get_double("pretrain.lr");
    o.schedule.warmup_epochs = get_int("pretrain.warmup_epochs");
    o.schedule.total_epochs = get_int("pretrain.epochs");
    o.adamw.beta1 = get_double("pretrain.beta1");
    o.adamw.beta2 = get_double("pretrain.beta2");
    o.adamw.eps = get_double("pretrain.eps");
    o.adamw.weight_decay = get_double("pretrain.weight_decay");
    o.augment.crop_min_scale = get_double("augment.crop_min_scale");
    o.augment.crop_max_scale = get_double("augment.crop_max_scale");
    o.augment.flip_prob = get_double("augment.flip_prob");
    o.augment.brightness = get_double("augment.brightness");
    o.augment.contrast = get_double("augment.contrast");
    o.augment.noise_sigma = get_double("augment.noise_sigma");
    o.spem = spem_config();
    o.batch_size = get_int("pretrain.batch_size");
    o.images_per_domain = get_int("pretrain.images_per_domain");
    // the prototype bank is skipped only when both modules are disabled
    o.build_bank = get_bool("spem.enabled") || get_bool("dapa.enabled");
    o.checkpoint_interval = get_int("pretrain.checkpoint_interval");
    return o;
}

detect::TrainHeadOptions RunConfig::train_head_options() const {
    detect::TrainHeadOptions o;
    o.schedule.base_lr = get_double("head.lr");
    o.schedule.warmup_epochs = 0;
    o.schedule.total_epochs = get_int("head.epochs");
    o.adamw.weight_decay = get_double("head.weight_decay");
    o.batch_size = get_int("head.batch_size");
    o.focal_alpha = get_double("head.focal_alpha");
    o.focal_gamma = get_double("head.focal_gamma");
    o.mid1 = get_int("head.mid1");
    o.mid2 = get_int("head.mid2");
    return o;
}

datagen::DomainSpec RunConfig::source_spec() const {
    datagen::DomainSpec s;
    s.texture_freq = get_double("data.texture_freq");
    s.base_brightness = get_double("data.base_brightness");
    s.contrast = get_double("data.contrast");
    s.noise_sigma = get_double("data.noise_sigma");
    s.defect_contrast = get_double("data.defect_contrast");
    s.crack_width_min = get_double("data.crack_width_min");
    s.crack_width_max = get_double("data.crack_width_max");
    s.pothole_radius_min = get_double("data.pothole_radius_min");
    s.pothole_radius_max = get_double("data.pothole_radius_max");
    return s;
}

datagen::PairOptions RunConfig::pair_options() const {
    datagen::PairOptions p;
    p.image_size = get_int("backbone.image_size");
    p.defects_min = get_int("data.defects_min");
    p.defects_max = get_int("data.defects_max");
    return p;
}

}  // namespace probe::cli
