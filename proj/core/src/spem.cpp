#include "probe/spem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "probe/ops.hpp"
#include "probe/rng.hpp"

namespace probe::spem {

using num::Tensor;
using num::TensorPtr;

// ---------------------------------------------------------------------------
// PCA

Matrix PcaModel::project(const Matrix& x) const {
    if (x.cols != input_dim()) throw DimensionError("pca project: dim mismatch");
    Matrix out(x.rows, reduced_dim());
    for (std::size_t r = 0; r < x.rows; ++r) {
        for (std::size_t c = 0; c < reduced_dim(); ++c) {
            const double* comp = components.row(c);
            double s = 0.0;
            for (std::size_t d = 0; d < x.cols; ++d) s += (x.at(r, d) - mean[d]) * comp[d];
            out.at(r, c) = s;
        }
    }
    return out;
}

Matrix PcaModel::reconstruct(const Matrix& z) const {
    if (z.cols != reduced_dim()) throw DimensionError("pca reconstruct: dim mismatch");
    Matrix out(z.rows, input_dim());
    for (std::size_t r = 0; r < z.rows; ++r) {
        double* dst = out.row(r);
        for (std::size_t d = 0; d < input_dim(); ++d) dst[d] = mean[d];
        for (std::size_t c = 0; c < reduced_dim(); ++c) {
            const double* comp = components.row(c);
            const double zv = z.at(r, c);
            for (std::size_t d = 0; d < input_dim(); ++d) dst[d] += zv * comp[d];
        }
    }
    return out;
}

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Deterministic
// sweep order; returns eigenvalues with matching eigenvectors as rows of V.
void jacobi_eigen(Matrix a, std::vector<double>& eigenvalues, Matrix& eigenvectors) {
    const std::size_t n = a.rows;
    eigenvectors = Matrix(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eigenvectors.at(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double app = a.at(p, p), aqq = a.at(q, q);
                const double theta = 0.5 * (aqq - app) / apq;
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vpk = eigenvectors.at(p, k), vqk = eigenvectors.at(q, k);
                    eigenvectors.at(p, k) = c * vpk - s * vqk;
                    eigenvectors.at(q, k) = s * vpk + c * vqk;
                }
            }
        }
    }
    eigenvalues.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigenvalues[i] = a.at(i, i);
}

}  // namespace

PcaModel fit_pca(const Matrix& data, int reduced_dim) {
    if (reduced_dim <= 0) throw ContractError("fit_pca: reduced_dim must be positive");
    if (data.rows <= static_cast<std::size_t>(reduced_dim))
        throw InsufficientDataError("fit_pca: " + std::to_string(data.rows) +
                                    " samples for reduced_dim " + std::to_string(reduced_dim));
    if (static_cast<std::size_t>(reduced_dim) > data.cols)
        throw ContractError("fit_pca: reduced_dim exceeds input dim");

    const std::size_t m = data.rows, d = data.cols;
    PcaModel model;
    model.mean = column_mean(data);

    Matrix cov(d, d, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = data.row(r);
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = row[i] - model.mean[i];
            for (std::size_t j = i; j < d; ++j) cov.at(i, j) += xi * (row[j] - model.mean[j]);
        }
    }
    const double denom = static_cast<double>(m - 1);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) {
            cov.at(i, j) /= denom;
            cov.at(j, i) = cov.at(i, j);
        }

    std::vector<double> eigenvalues;
    Matrix eigenvectors;
    jacobi_eigen(cov, eigenvalues, eigenvectors);

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return eigenvalues[a] > eigenvalues[b]; });

    model.components = Matrix(reduced_dim, d);
    model.explained_variance.resize(reduced_dim);
    for (int c = 0; c < reduced_dim; ++c) {
        const std::size_t src = order[static_cast<std::size_t>(c)];
        model.explained_variance[static_cast<std::size_t>(c)] = eigenvalues[src];
        double* dst = model.components.row(static_cast<std::size_t>(c));
        for (std::size_t j = 0; j < d; ++j) dst[j] = eigenvectors.at(src, j);
        // deterministic orientation: largest-magnitude coordinate positive
        std::size_t arg = 0;
        for (std::size_t j = 1; j < d; ++j)
            if (std::fabs(dst[j]) > std::fabs(dst[arg])) arg = j;
        if (dst[arg] < 0.0)
            for (std::size_t j = 0; j < d; ++j) dst[j] = -dst[j];
    }
    return model;
}

// ---------------------------------------------------------------------------
// k-means

namespace {

double nearest_centroid(const Matrix& centroids, const double* point, int& best) {
    double best_d = std::numeric_limits<double>::infinity();
    best = 0;
    for (std::size_t c = 0; c < centroids.rows; ++c) {
        const double d = squared_distance(centroids.row(c), point, centroids.cols);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best_d;
}

KMeansResult kmeans_single(const Matrix& points, int k, std::uint64_t seed, int max_iter) {
    const std::size_t m = points.rows, d = points.cols;
    Rng rng(seed);
    KMeansResult res;
    res.centroids = Matrix(static_cast<std::size_t>(k), d);

    // k-means++ seeding
    std::vector<double> min_d2(m, std::numeric_limits<double>::infinity());
    std::size_t first = rng.uniform_int(m);
    std::copy(points.row(first), points.row(first) + d, res.centroids.row(0));
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double dd = squared_distance(res.centroids.row(c - 1), points.row(i), d);
            min_d2[i] = std::min(min_d2[i], dd);
            total += min_d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            pick = m - 1;
            for (std::size_t i = 0; i < m; ++i) {
                acc += min_d2[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_int(m);
        }
        std::copy(points.row(pick), points.row(pick) + d, res.centroids.row(c));
    }

    res.assignments.assign(m, -1);
    std::vector<int> next(m, -1);
    for (int it = 0; it < max_iter; ++it) {
        double inertia = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            int best;
            inertia += nearest_centroid(res.centroids, points.row(i), best);
            next[i] = best;
        }
        res.inertia_trace.push_back(inertia);
        res.inertia = inertia;
        res.iterations = it + 1;
        if (next == res.assignments) break;
        res.assignments = next;

        Matrix sums(static_cast<std::size_t>(k), d, 0.0);
        std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < m; ++i) {
            const auto c = static_cast<std::size_t>(res.assignments[i]);
            ++counts[c];
            const double* p = points.row(i);
            double* s = sums.row(c);
            for (std::size_t j = 0; j < d; ++j) s[j] += p[j];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) {
                // re-seed at the point farthest from its centroid so K stays fixed
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double dd = squared_distance(
                        res.centroids.row(static_cast<std::size_t>(res.assignments[i])),
                        points.row(i), d);
                    if (dd > far_d) {
                        far_d = dd;
                        far = i;
                    }
                }
                std::copy(points.row(far), points.row(far) + d,
                          res.centroids.row(static_cast<std::size_t>(c)));
            } else {
                double* dst = res.centroids.row(static_cast<std::size_t>(c));
                const double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(c)]);
                for (std::size_t j = 0; j < d; ++j)
                    dst[j] = sums.at(static_cast<std::size_t>(c), j) * inv;
            }
        }
    }
    // final assignment pass so assignments match the returned centroids
    double inertia = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        int best;
        inertia += nearest_centroid(res.centroids, points.row(i), best);
        res.assignments[i] = best;
    }
    res.inertia = inertia;
    return res;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter, int n_init) {
    if (k <= 0) throw ContractError("kmeans: k must be positive");
    if (points.rows < static_cast<std::size_t>(k))
        throw InsufficientDataError("kmeans: " + std::to_string(points.rows) + " points for k " +
                                    std::to_string(k));
    if (n_init <= 0 || max_iter <= 0) throw ContractError("kmeans: bad iteration budget");

    KMeansResult best;
    bool have = false;
    for (int run = 0; run < n_init; ++run) {
        KMeansResult r = kmeans_single(points, k, derive_seed(seed, "kmeans_init", run), max_iter);
        if (!have || r.inertia < best.inertia) {  // strict: ties keep the lowest run index
            best = std::move(r);
            have = true;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// prompt bank

TensorPtr PromptBank::project_prompts() const { return projector.apply(centroid_input); }

void PromptBank::refresh_cache() {
    prompts_cache = num::stop_gradient(project_prompts());
}

Matrix harvest_patch_embeddings(const backbone::Encoder& encoder,
                                const std::vector<datagen::LabeledScene>& images) {
    if (images.empty()) throw InsufficientDataError("harvest: no target images");
    const auto n = static_cast<std::size_t>(encoder.config().num_tokens());
    const auto d = static_cast<std::size_t>(encoder.config().embed_dim);
    Matrix out(images.size() * n, d);
    for (std::size_t i = 0; i < images.size(); ++i) {
        TensorPtr tokens = encoder.content_tokens(images[i].image);
        std::copy(tokens->data(), tokens->data() + n * d, out.row(i * n));
    }
    return out;
}

namespace {

AssignmentMap make_assignment_map(const std::vector<int>& assignments, std::size_t n_images,
                                  std::size_t patches_per_image, int k) {
    AssignmentMap map;
    map.num_clusters = k;
    map.per_image.resize(n_images);
    map.histograms.assign(n_images, std::vector<double>(static_cast<std::size_t>(k), 0.0));
    for (std::size_t i = 0; i < n_images; ++i) {
        map.per_image[i].assign(assignments.begin() + i * patches_per_image,
                                assignments.begin() + (i + 1) * patches_per_image);
        for (int c : map.per_image[i]) map.histograms[i][static_cast<std::size_t>(c)] += 1.0;
    }
    return map;
}

}  // namespace

PromptBank build_prompt_bank(const std::vector<datagen::LabeledScene>& target_images,
                             const backbone::Encoder& encoder, const SpemConfig& cfg,
                             std::uint64_t seed, PcaModel* pca_out, AssignmentMap* assign_out) {
    const Matrix embeddings = harvest_patch_embeddings(encoder, target_images);
    PcaModel pca = fit_pca(embeddings, cfg.reduced_dim);
    const Matrix reduced = pca.project(embeddings);
    KMeansResult km = kmeans(reduced, cfg.num_prototypes, derive_seed(seed, "kmeans"),
                             cfg.kmeans_max_iter, cfg.kmeans_n_init);

    PromptBank bank;
    bank.centroids = km.centroids;
    bank.temperature = cfg.temperature;
    const int d = encoder.config().embed_dim;
    const int hidden = cfg.hidden_dim > 0 ? cfg.hidden_dim : std::max(1, d / 4);
    Rng proj_rng(derive_seed(seed, "prompt_projector"));
    bank.projector = Mlp::init(static_cast<std::size_t>(cfg.reduced_dim),
                               static_cast<std::size_t>(hidden), static_cast<std::size_t>(d),
                               proj_rng, true);
    bank.centroid_input = Tensor::make({bank.centroids.rows, bank.centroids.cols},
                                       bank.centroids.a, false);
    bank.refresh_cache();

    if (pca_out) *pca_out = pca;
    if (assign_out)
        *assign_out = make_assignment_map(km.assignments, target_images.size(),
                                          static_cast<std::size_t>(encoder.config().num_tokens()),
                                          cfg.num_prototypes);
    return bank;
}

void refresh_centroids(PromptBank& bank, const std::vector<datagen::LabeledScene>& target_images,
                       const backbone::Encoder& encoder, const PcaModel& pca,
                       const SpemConfig& cfg, std::uint64_t seed, AssignmentMap* assign_out) {
    const Matrix embeddings = harvest_patch_embeddings(encoder, target_images);
    const Matrix reduced = pca.project(embeddings);
    KMeansResult km = kmeans(reduced, cfg.num_prototypes, derive_seed(seed, "kmeans"),
                             cfg.kmeans_max_iter, cfg.kmeans_n_init);
    bank.centroids = km.centroids;
    bank.centroid_input = Tensor::make({bank.centroids.rows, bank.centroids.cols},
                                       bank.centroids.a, false);
    bank.refresh_cache();
    if (assign_out)
        *assign_out = make_assignment_map(km.assignments, target_images.size(),
                                          static_cast<std::size_t>(encoder.config().num_tokens()),
                                          cfg.num_prototypes);
}

TensorPtr per_image_prompt_mean(const TensorPtr& prompts, const AssignmentMap& map,
                                std::size_t image_index) {
    if (image_index >= map.histograms.size())
        throw ContractError("per_image_prompt_mean: image index out of range");
    const std::vector<double>& hist = map.histograms[image_index];
    if (prompts->ndim() != 2 || prompts->dim(0) != hist.size())
        throw DimensionError("per_image_prompt_mean: prompts/histogram mismatch");
    double total = 0.0;
    for (double h : hist) total += h;
    std::vector<double> weights(hist.size());
    for (std::size_t i = 0; i < hist.size(); ++i) weights[i] = hist[i] / total;
    auto w = Tensor::make({1, hist.size()}, std::move(weights), false);
    return num::reshape(num::matmul(w, prompts), {prompts->dim(1)});
}

TensorPtr prompt_consistency_loss(const std::vector<TensorPtr>& batch_pooled,
                                  const std::vector<TensorPtr>& batch_prompt_means,
                                  double temperature) {
    const std::size_t b = batch_pooled.size();
    if (b == 0 || batch_prompt_means.size() != b)
        throw ContractError("prompt_consistency_loss: batch sizes disagree or empty");
    if (temperature <= 0.0) throw ContractError("prompt_consistency_loss: temperature must be > 0");

    // all pairwise similarities; own pair shares the graph node with its row
    std::vector<std::vector<TensorPtr>> sims(b, std::vector<TensorPtr>(b));
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j)
            sims[i][j] = num::scale(num::cosine_sim(batch_pooled[i], batch_prompt_means[j]),
                                    1.0 / temperature);

    TensorPtr loss = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<TensorPtr> row;
        row.reserve(b);
        double row_max = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < b; ++j) {
            row.push_back(num::reshape(sims[i][j], {1}));
            row_max = std::max(row_max, sims[i][j]->item());
        }
        auto vec = num::concat_rows(row);
        auto lse = num::add_scalar(num::log(num::sum(num::exp(num::add_scalar(vec, -row_max)))),
                                   row_max);
        loss = num::add(loss, num::sub(lse, sims[i][i]));
    }
    return loss;
}

std::vector<int> patch_defect_flags(const datagen::LabeledScene& scene, int patch_size) {
    const int s = scene.image.height;
    const int side = s / patch_size;
    std::vector<int> flags(static_cast<std::size_t>(side) * side, 0);
    for (int gy = 0; gy < side; ++gy) {
        for (int gx = 0; gx < side; ++gx) {
            Box cell;
            cell.x_min = static_cast<double>(gx * patch_size) / s;
            cell.x_max = static_cast<double>((gx + 1) * patch_size) / s;
            cell.y_min = static_cast<double>(gy * patch_size) / s;
            cell.y_max = static_cast<double>((gy + 1) * patch_size) / s;
            for (const auto& [cls, box] : scene.boxes) {
                if (intersection_area(cell, box) > 0.0) {
                    flags[static_cast<std::size_t>(gy) * side + gx] = 1;
                    break;
                }
            }
        }
    }
    return flags;
}

std::vector<ClusterStats> cluster_stats(const Matrix& points, const KMeansResult& km,
                                        const std::vector<int>& defect_flags) {
    if (defect_flags.size() != points.rows)
        throw ContractError("cluster_stats: flag count does not match points");
    std::vector<ClusterStats> stats(km.centroids.rows);
    for (std::size_t c = 0; c < km.centroids.rows; ++c) stats[c].cluster = static_cast<int>(c);
    for (std::size_t i = 0; i < points.rows; ++i) {
        const auto c = static_cast<std::size_t>(km.assignments[i]);
        ++stats[c].size;
        stats[c].defect_members += defect_flags[i] ? 1u : 0u;
        stats[c].inertia += squared_distance(km.centroids.row(c), points.row(i), points.cols);
    }
    for (auto& s : stats)
        s.purity = s.size ? static_cast<double>(s.defect_members) / static_cast<double>(s.size) : 0.0;
    return stats;
}

}  // namespace probe::spem
