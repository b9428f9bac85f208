#include "probe/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "probe/rng.hpp"

namespace probe::cli {

namespace {

constexpr char kMagic[] = "PROBECKPT";
constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    num::Shape shape;
    std::vector<double> data;
};

struct Section {
    std::string name;
    std::vector<NamedTensor> tensors;
};

void put_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw ParseError("checkpoint: truncated while reading u32");
    return v;
}
std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw ParseError("checkpoint: truncated while reading u64");
    return v;
}
std::string read_string(std::istream& in) {
    const std::uint32_t n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw ParseError("checkpoint: truncated while reading string");
    return s;
}

NamedTensor from_tensor(const std::string& name, const num::TensorPtr& t) {
    return {name, t->shape(), t->values()};
}

NamedTensor from_vector(const std::string& name, const std::vector<double>& v) {
    return {name, num::Shape{v.size()}, v};
}

NamedTensor from_matrix(const std::string& name, const Matrix& m) {
    return {name, num::Shape{m.rows, m.cols}, m.a};
}

std::vector<Section> collect_sections(const ModelState& model,
                                      const pretrain::OptimizerSnapshot* optimizer) {
    std::vector<Section> sections;
    {
        Section s{"backbone", {}};
        for (const auto& [name, t] : model.encoder->named_params())
            s.tensors.push_back(from_tensor(name, t));
        sections.push_back(std::move(s));
    }
    if (model.pca) {
        Section s{"pca", {}};
        s.tensors.push_back(from_vector("mean", model.pca->mean));
        s.tensors.push_back(from_matrix("components", model.pca->components));
        s.tensors.push_back(from_vector("explained_variance", model.pca->explained_variance));
        sections.push_back(std::move(s));
    }
    if (model.bank) {
        Section s{"prompt_bank", {}};
        s.tensors.push_back(from_matrix("centroids", model.bank->centroids));
        for (const auto& [name, t] : model.bank->projector.named_params("theta_p"))
            s.tensors.push_back(from_tensor(name, t));
        s.tensors.push_back(from_tensor("prompts_cache", model.bank->prompts_cache));
        sections.push_back(std::move(s));
    }
    {
        Section s{"ssl_heads", {}};
        for (const auto& [name, t] : model.ssl.named_params())
            s.tensors.push_back(from_tensor(name, t));
        sections.push_back(std::move(s));
    }
    if (!model.align_head.is_identity()) {
        Section s{"dapa_head", {}};
        for (const auto& [name, t] : model.align_head.named_params("f_p"))
            s.tensors.push_back(from_tensor(name, t));
        sections.push_back(std::move(s));
    }
    if (model.det_head) {
        Section s{"det_head", {}};
        for (const auto& [name, t] : model.det_head->named_params())
            s.tensors.push_back(from_tensor(name, t));
        const num::BatchNormState& bn = model.det_head->bn_state();
        s.tensors.push_back(from_vector("bn.running_mean", bn.running_mean));
        s.tensors.push_back(from_vector("bn.running_var", bn.running_var));
        sections.push_back(std::move(s));
    }
    if (optimizer && !optimizer->moments.empty()) {
        Section s{"optimizer", {}};
        s.tensors.push_back(
            from_vector("step_count", {static_cast<double>(optimizer->step_count)}));
        for (const auto& [name, mv] : optimizer->moments) {
            s.tensors.push_back(from_vector(name + ".m", mv.first));
            s.tensors.push_back(from_vector(name + ".v", mv.second));
        }
        sections.push_back(std::move(s));
    }
    return sections;
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const ModelState& model,
                     const pretrain::OptimizerSnapshot* optimizer) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, sizeof(kMagic) - 1);
    put_u32(out, kVersion);
    put_u64(out, model.opt.master_seed);
    put_string(out, cfg.serialize());
    put_u32(out, static_cast<std::uint32_t>(model.pretrained_epochs));

    const std::vector<Section> sections = collect_sections(model, optimizer);
    put_u32(out, static_cast<std::uint32_t>(sections.size()));
    for (const Section& s : sections) {
        put_string(out, s.name);
        put_u32(out, static_cast<std::uint32_t>(s.tensors.size()));
        for (const NamedTensor& t : s.tensors) {
            put_string(out, t.name);
            put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
            for (std::size_t d : t.shape) put_u64(out, d);
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        }
    }
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

namespace {

// Writes the stored buffer into an existing tensor, shapes must agree.
void load_into(const NamedTensor& src, const num::TensorPtr& dst, const std::string& where) {
    if (!num::same_shape(src.shape, dst->shape()))
        throw StateError("checkpoint: shape mismatch for " + where + "." + src.name + ": stored " +
                         num::shape_str(src.shape) + " vs model " + num::shape_str(dst->shape()));
    dst->values() = src.data;
}

const NamedTensor& find_tensor(const Section& s, const std::string& name) {
    for (const NamedTensor& t : s.tensors)
        if (t.name == name) return t;
    throw StateError("checkpoint: section '" + s.name + "' has no tensor '" + name + "'");
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    char magic[sizeof(kMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw ParseError("checkpoint: bad magic in " + path);
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw StateError("checkpoint: version " + std::to_string(version) +
                         " unsupported (expected " + std::to_string(kVersion) + ")");
    const std::uint64_t seed = read_u64(in);
    const std::string config_text = read_string(in);
    const std::uint32_t epochs = read_u32(in);

    RunConfig cfg = RunConfig::from_string(config_text, path + "(config)");

    std::vector<Section> sections;
    const std::uint32_t n_sections = read_u32(in);
    for (std::uint32_t i = 0; i < n_sections; ++i) {
        Section s;
        s.name = read_string(in);
        const std::uint32_t n_tensors = read_u32(in);
        for (std::uint32_t t = 0; t < n_tensors; ++t) {
            NamedTensor nt;
            nt.name = read_string(in);
            const std::uint32_t ndim = read_u32(in);
            nt.shape.resize(ndim);
            std::size_t numel = 1;
            for (std::uint32_t d = 0; d < ndim; ++d) {
                nt.shape[d] = static_cast<std::size_t>(read_u64(in));
                numel *= nt.shape[d];
            }
            nt.data.resize(numel);
            in.read(reinterpret_cast<char*>(nt.data.data()),
                    static_cast<std::streamsize>(numel * sizeof(double)));
            if (!in) throw ParseError("checkpoint: truncated tensor payload in " + path);
            s.tensors.push_back(std::move(nt));
        }
        sections.push_back(std::move(s));
    }

    auto section = [&](const std::string& name) -> const Section* {
        for (const Section& s : sections)
            if (s.name == name) return &s;
        return nullptr;
    };

    LoadedCheckpoint out{cfg, make_model(cfg.model_options()), {}};
    ModelState& model = out.model;
    if (model.opt.master_seed != seed)
        throw StateError("checkpoint: seed record disagrees with config snapshot");
    model.pretrained_epochs = static_cast<int>(epochs);

    const Section* sb = section("backbone");
    if (!sb) throw StateError("checkpoint: missing backbone section");
    for (const auto& [name, t] : model.encoder->named_params())
        load_into(find_tensor(*sb, name), t, "backbone");

    if (const Section* sp = section("pca")) {
        spem::PcaModel pca;
        pca.mean = find_tensor(*sp, "mean").data;
        const NamedTensor& comp = find_tensor(*sp, "components");
        pca.components = Matrix(comp.shape[0], comp.shape[1]);
        pca.components.a = comp.data;
        pca.explained_variance = find_tensor(*sp, "explained_variance").data;
        model.pca = std::move(pca);
    }
    if (const Section* sk = section("prompt_bank")) {
        spem::PromptBank bank;
        const NamedTensor& cents = find_tensor(*sk, "centroids");
        bank.centroids = Matrix(cents.shape[0], cents.shape[1]);
        bank.centroids.a = cents.data;
        bank.temperature = cfg.get_double("spem.temperature");
        const spem::SpemConfig sc = cfg.spem_config();
        const int d = cfg.get_int("backbone.embed_dim");
        const int hidden = sc.hidden_dim > 0 ? sc.hidden_dim : std::max(1, d / 4);
        Rng rng(derive_seed(seed, "prompt_projector"));
        bank.projector = Mlp::init(static_cast<std::size_t>(sc.reduced_dim),
                                   static_cast<std::size_t>(hidden), static_cast<std::size_t>(d),
                                   rng, true);
        for (const auto& [name, t] : bank.projector.named_params("theta_p"))
            load_into(find_tensor(*sk, name), t, "prompt_bank");
        bank.centroid_input =
            num::Tensor::make({bank.centroids.rows, bank.centroids.cols}, bank.centroids.a, false);
        const NamedTensor& cache = find_tensor(*sk, "prompts_cache");
        bank.prompts_cache = num::Tensor::make(cache.shape, cache.data, false);
        model.bank = std::move(bank);
    }
    const Section* ss = section("ssl_heads");
    if (!ss) throw StateError("checkpoint: missing ssl_heads section");
    for (const auto& [name, t] : model.ssl.named_params())
        load_into(find_tensor(*ss, name), t, "ssl_heads");

    if (!model.align_head.is_identity()) {
        const Section* sd = section("dapa_head");
        if (!sd) throw StateError("checkpoint: missing dapa_head section");
        for (const auto& [name, t] : model.align_head.named_params("f_p"))
            load_into(find_tensor(*sd, name), t, "dapa_head");
    }
    if (const Section* sh = section("det_head")) {
        detect::HeadConfig hc;
        hc.grid = model.encoder->config().tokens_per_side();
        hc.in_dim = model.encoder->config().embed_dim;
        hc.mid1 = cfg.get_int("head.mid1");
        hc.mid2 = cfg.get_int("head.mid2");
        hc.num_classes = datagen::kNumClasses;
        model.det_head.emplace(hc, derive_seed(seed, "det_head"));
        for (const auto& [name, t] : model.det_head->named_params())
            load_into(find_tensor(*sh, name), t, "det_head");
        model.det_head->bn_state().running_mean = find_tensor(*sh, "bn.running_mean").data;
        model.det_head->bn_state().running_var = find_tensor(*sh, "bn.running_var").data;
    }
    if (const Section* so = section("optimizer")) {
        out.optimizer.step_count =
            static_cast<std::int64_t>(find_tensor(*so, "step_count").data.at(0));
        for (const NamedTensor& t : so->tensors) {
            if (t.name == "step_count") continue;
            const bool is_m = t.name.size() > 2 && t.name.substr(t.name.size() - 2) == ".m";
            const bool is_v = t.name.size() > 2 && t.name.substr(t.name.size() - 2) == ".v";
            if (!is_m && !is_v) continue;
            const std::string param = t.name.substr(0, t.name.size() - 2);
            auto& slot = out.optimizer.moments[param];
            (is_m ? slot.first : slot.second) = t.data;
        }
    }
    return out;
}

}  // namespace probe::cli
