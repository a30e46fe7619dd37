#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace ktrace {

/// Shared prerequisite structure, parameterized by KC embeddings U (K x D)
/// and a mixing matrix M (D x D). Edge probabilities factor into existence
/// and directionality:
///   a[i][k] = sigmoid(u_i . u_k) * sigmoid(u_i^T (M - M^T) u_k)
/// so a[i][k] + a[k][i] = sigmoid(u_i . u_k) and mutual prerequisites are
/// impossible. The diagonal is fixed to zero; the structural mean sums over
/// i != k only.
struct PrerequisiteGraph {
  Eigen::MatrixXd U;  // K x D
  Eigen::MatrixXd M;  // D x D

  int num_kcs() const { return static_cast<int>(U.rows()); }
  int embedding_dim() const { return static_cast<int>(U.cols()); }

  static PrerequisiteGraph zero(int num_kcs, int embedding_dim = 16);
};

/// Dense K x K matrix of edge probabilities with zero diagonal.
struct AdjacencyMatrix {
  Eigen::MatrixXd a;

  int num_kcs() const { return static_cast<int>(a.rows()); }
  double operator()(int i, int k) const { return a(i, k); }
};

/// Probability that KC i is a prerequisite of KC k (i != k).
double edge_probability(const PrerequisiteGraph& graph, int i, int k);

/// All pairwise edge probabilities.
AdjacencyMatrix adjacency_matrix(const PrerequisiteGraph& graph);

/// Structure-adjusted long-term mean for KC k:
///   mu + (gamma / K) * sum_{i != k} a[i][k] * z[i]
double structural_mean(const Eigen::VectorXd& z, const AdjacencyMatrix& adjacency,
                       double mu, double gamma, int k);

/// Vectorized structural means for all KCs at once; equals per-k calls.
Eigen::VectorXd structural_means(const Eigen::VectorXd& z,
                                 const AdjacencyMatrix& adjacency, double mu,
                                 double gamma);

/// Writes edges with probability above `threshold` as CSV rows
/// source_kc,target_kc,probability.
void write_graph_csv(const AdjacencyMatrix& adjacency,
                     const std::vector<std::string>& kc_ids, double threshold,
                     const std::string& path);

/// JSON round-trip of the raw parameterization (U, M and the KC ids).
std::string graph_to_json(const PrerequisiteGraph& graph,
                          const std::vector<std::string>& kc_ids);
PrerequisiteGraph graph_from_json(const std::string& json_text,
                                  std::vector<std::string>* kc_ids = nullptr);

}  // namespace ktrace
