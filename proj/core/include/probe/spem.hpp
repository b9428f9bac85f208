#pragma once

#include <cstdint>
#include <vector>

#include "probe/backbone.hpp"
#include "probe/datagen.hpp"
#include "probe/matrix.hpp"
#include "probe/mlp.hpp"
#include "probe/tensor.hpp"

namespace probe::spem {

struct SpemConfig {
    int reduced_dim = 16;      // d'
    int num_prototypes = 10;   // K
    int hidden_dim = 0;        // 0 -> embed_dim / 4
    double temperature = 0.1;  // tau
    int kmeans_max_iter = 300;
    int kmeans_n_init = 10;
    int refresh_interval = 0;  // epochs between centroid refreshes; 0 disables
};

// Principal axes of the pooled target patch embeddings. Fit once per domain;
// components are orthonormal rows sorted by descending explained variance
// (unbiased covariance, no whitening).
struct PcaModel {
    std::vector<double> mean;                // [D]
    Matrix components;                       // [d' x D]
    std::vector<double> explained_variance;  // [d']

    std::size_t input_dim() const { return components.cols; }
    std::size_t reduced_dim() const { return components.rows; }

    Matrix project(const Matrix& x) const;
    Matrix reconstruct(const Matrix& z) const;
};

PcaModel fit_pca(const Matrix& data, int reduced_dim);

struct KMeansResult {
    Matrix centroids;              // [K x d']
    std::vector<int> assignments;  // nearest centroid per point
    double inertia = 0.0;
    int iterations = 0;
    std::vector<double> inertia_trace;  // per Lloyd iteration of the winning run
};

// Best of n_init runs by inertia (ties: lowest run index); k-means++
// seeding; empty clusters re-seeded at the farthest point.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 300,
                    int n_init = 10);

// Per-image cluster ids for each patch plus the cluster frequency histogram.
struct AssignmentMap {
    int num_clusters = 0;
    std::vector<std::vector<int>> per_image;
    std::vector<std::vector<double>> histograms;  // counts, sum to N per image
};

// K visual prototypes in reduced space plus the projector that lifts them
// into the backbone embedding space.
struct PromptBank {
    Matrix centroids;                // [K x d']
    Mlp projector;                   // theta_p: d' -> hidden -> D
    num::TensorPtr centroid_input;   // [K,d'] constant
    num::TensorPtr prompts_cache;    // [K,D] detached MLP(centroids)
    double temperature = 0.1;

    int num_prototypes() const { return static_cast<int>(centroids.rows); }

    // Graph-recording projection; gradient reaches theta_p.
    num::TensorPtr project_prompts() const;

    // Re-derives the detached cache from the current projector weights.
    void refresh_cache();
};

// Content embeddings (patch projection, no position encodings) of every
// patch of every image, stacked [n_images * N, D]. Prompts are never
// injected while harvesting.
Matrix harvest_patch_embeddings(const backbone::Encoder& encoder,
                                const std::vector<datagen::LabeledScene>& images);

PromptBank build_prompt_bank(const std::vector<datagen::LabeledScene>& target_images,
                             const backbone::Encoder& encoder, const SpemConfig& cfg,
                             std::uint64_t seed, PcaModel* pca_out, AssignmentMap* assign_out);

// Recompute centroids and assignments with the original PCA basis; the
// projector (theta_p) is retained.
void refresh_centroids(PromptBank& bank, const std::vector<datagen::LabeledScene>& target_images,
                       const backbone::Encoder& encoder, const PcaModel& pca,
                       const SpemConfig& cfg, std::uint64_t seed, AssignmentMap* assign_out);

// Frequency-weighted mean of projected prompts over the clusters this
// image's patches occupy.
num::TensorPtr per_image_prompt_mean(const num::TensorPtr& prompts, const AssignmentMap& map,
                                     std::size_t image_index);

// Temperature-scaled InfoNCE over (pooled feature, per-image prompt mean)
// pairs; own pair in the numerator, batch pairs in the denominator.
num::TensorPtr prompt_consistency_loss(const std::vector<num::TensorPtr>& batch_pooled,
                                       const std::vector<num::TensorPtr>& batch_prompt_means,
                                       double temperature);

// -- reporting helpers (cluster CSV, acceptance checks)

std::vector<int> patch_defect_flags(const datagen::LabeledScene& scene, int patch_size);

struct ClusterStats {
    int cluster = 0;
    std::size_t size = 0;
    std::size_t defect_members = 0;
    double purity = 0.0;   // defect_members / size (0 for empty clusters)
    double inertia = 0.0;  // sum of squared distances of members
};

std::vector<ClusterStats> cluster_stats(const Matrix& points, const KMeansResult& km,
                                        const std::vector<int>& defect_flags);

}  // namespace probe::spem
