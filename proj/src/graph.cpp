#include "ktrace/graph.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "ktrace/common.hpp"

namespace ktrace {

using json = nlohmann::json;

PrerequisiteGraph PrerequisiteGraph::zero(int num_kcs, int embedding_dim) {
  PrerequisiteGraph g;
  g.U = Eigen::MatrixXd::Zero(num_kcs, embedding_dim);
  g.M = Eigen::MatrixXd::Zero(embedding_dim, embedding_dim);
  return g;
}

double edge_probability(const PrerequisiteGraph& graph, int i, int k) {
  const int K = graph.num_kcs();
  if (i < 0 || k < 0 || i >= K || k >= K)
    throw std::invalid_argument("edge_probability: KC index out of range");
  if (i == k)
    throw std::invalid_argument("edge_probability: self-edges are excluded (i == k)");
  const double existence = graph.U.row(i).dot(graph.U.row(k));
  const Eigen::MatrixXd skew = graph.M - graph.M.transpose();
  const double direction = graph.U.row(i) * skew * graph.U.row(k).transpose();
  return sigmoid(existence) * sigmoid(direction);
}

AdjacencyMatrix adjacency_matrix(const PrerequisiteGraph& graph) {
  const int K = graph.num_kcs();
  const Eigen::MatrixXd existence = graph.U * graph.U.transpose();
  const Eigen::MatrixXd direction =
      graph.U * (graph.M - graph.M.transpose()) * graph.U.transpose();
  AdjacencyMatrix adj;
  adj.a = Eigen::MatrixXd::Zero(K, K);
  for (int i = 0; i < K; ++i)
    for (int k = 0; k < K; ++k)
      if (i != k) adj.a(i, k) = sigmoid(existence(i, k)) * sigmoid(direction(i, k));
  return adj;
}

double structural_mean(const Eigen::VectorXd& z, const AdjacencyMatrix& adjacency,
                       double mu, double gamma, int k) {
  const int K = adjacency.num_kcs();
  if (k < 0 || k >= K) throw std::invalid_argument("structural_mean: KC index out of range");
  if (z.size() != K) throw std::invalid_argument("structural_mean: state size mismatch");
  double coupling = 0.0;
  for (int i = 0; i < K; ++i)
    if (i != k) coupling += adjacency.a(i, k) * z(i);
  return mu + gamma / static_cast<double>(K) * coupling;
}

Eigen::VectorXd structural_means(const Eigen::VectorXd& z,
                                 const AdjacencyMatrix& adjacency, double mu,
                                 double gamma) {
  const int K = adjacency.num_kcs();
  if (z.size() != K) throw std::invalid_argument("structural_means: state size mismatch");
  // Column k of A collects the incoming prerequisite weights; the diagonal is
  // zero so the matrix product already skips i == k.
  Eigen::VectorXd coupling = adjacency.a.transpose() * z;
  return Eigen::VectorXd::Constant(K, mu) + (gamma / static_cast<double>(K)) * coupling;
}

void write_graph_csv(const AdjacencyMatrix& adjacency,
                     const std::vector<std::string>& kc_ids, double threshold,
                     const std::string& path) {
  const int K = adjacency.num_kcs();
  if (static_cast<int>(kc_ids.size()) != K)
    throw std::invalid_argument("write_graph_csv: KC id count mismatch");
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write graph file: " + path);
  out << "source_kc,target_kc,probability\n";
  char buf[48];
  for (int i = 0; i < K; ++i) {
    for (int k = 0; k < K; ++k) {
      if (i == k || adjacency.a(i, k) <= threshold) continue;
      std::snprintf(buf, sizeof(buf), "%.9g", adjacency.a(i, k));
      out << kc_ids[i] << ',' << kc_ids[k] << ',' << buf << '\n';
    }
  }
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& rows) {
  if (!rows.is_array() || rows.empty())
    throw std::invalid_argument("graph_from_json: expected a non-empty matrix");
  const Eigen::Index n_rows = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index n_cols = static_cast<Eigen::Index>(rows[0].size());
  Eigen::MatrixXd m(n_rows, n_cols);
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != n_cols)
      throw std::invalid_argument("graph_from_json: ragged matrix");
    for (Eigen::Index c = 0; c < n_cols; ++c) m(r, c) = rows[r][c].get<double>();
  }
  return m;
}

}  // namespace

std::string graph_to_json(const PrerequisiteGraph& graph,
                          const std::vector<std::string>& kc_ids) {
  json j;
  j["schema"] = "ktrace-graph-v1";
  j["kc_ids"] = kc_ids;
  j["embedding_dim"] = graph.embedding_dim();
  j["U"] = matrix_to_json(graph.U);
  j["M"] = matrix_to_json(graph.M);
  return j.dump(2);
}

PrerequisiteGraph graph_from_json(const std::string& json_text,
                                  std::vector<std::string>* kc_ids) {
  const json j = json::parse(json_text);
  if (j.value("schema", "") != "ktrace-graph-v1")
    throw std::invalid_argument("graph_from_json: unknown schema tag");
  PrerequisiteGraph g;
  g.U = matrix_from_json(j.at("U"));
  g.M = matrix_from_json(j.at("M"));
  if (g.M.rows() != g.M.cols() || g.M.rows() != g.U.cols())
    throw std::invalid_argument("graph_from_json: inconsistent dimensions");
  if (kc_ids) *kc_ids = j.at("kc_ids").get<std::vector<std::string>>();
  return g;
}

}  // namespace ktrace
