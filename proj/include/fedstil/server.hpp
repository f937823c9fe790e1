#pragma once

#include <map>
#include <vector>

#include "fedstil/client.hpp"
#include "fedstil/model.hpp"

namespace fedstil {

// Per-client task features, keeping only the last window+1 rounds each.
class FeatureHistory {
 public:
  explicit FeatureHistory(int retention_window = 5) : window_(retention_window) {}

  // Rounds must be non-decreasing per client; same round overwrites.
  void record(const TaskFeature& feature);
  const std::map<int, TaskFeature>* rounds_for(int client) const;
  bool has(int client, int round) const;
  const TaskFeature& at(int client, int round) const;
  int retention_window() const { return window_; }
  const std::map<int, std::map<int, TaskFeature>>& all() const { return features_; }

 private:
  int window_;
  std::map<int, std::map<int, TaskFeature>> features_;
};

// Latest composed upload per client.
class ParamStore {
 public:
  void record(int client, ParamVector theta, int round);
  bool has(int client) const { return uploads_.count(client) != 0; }
  const ParamVector& theta(int client) const;
  int upload_round(int client) const;
  std::vector<int> clients() const;
  std::size_t size() const { return uploads_.size(); }
  const std::map<int, std::pair<ParamVector, int>>& all() const { return uploads_; }

 private:
  std::map<int, std::pair<ParamVector, int>> uploads_;
};

struct RelevanceRow {
  int client = 0;
  int round = 0;
  std::map<int, double> raw;      // accumulated discounted similarity per peer
  std::map<int, double> weights;  // raw normalized to sum 1; empty iff raw empty
};

// exp(-KL(softmax(f_i / tau) || softmax(f_j / tau))); in (0, 1], 1 for
// identical features.
double task_similarity(const TaskFeature& f_i, const TaskFeature& f_j,
                       double temperature);

// raw_ij = sum over recorded rounds t' in [t-window, t] of
// lambda_f^(t-t') * S(f_i^(t), f_j^(t')). Peers without any recorded feature
// in the window are excluded; include_self adds the client's own history as
// a peer.
RelevanceRow knowledge_relevance(const FeatureHistory& history, int client, int round,
                                 double lambda_f, int window, double temperature,
                                 bool include_self = false);

// Drops raws for peers outside `eligible` and renormalizes.
RelevanceRow restrict_row(const RelevanceRow& row, const std::vector<int>& eligible);

// B_i = sum_j weights[j] * theta_j; all-zeros when the row is empty.
ParamVector aggregate_base(const ParamStore& store, const RelevanceRow& row,
                           std::size_t param_len);

// Unweighted mean of stored uploads; include_self=false drops client i's own.
ParamVector uniform_aggregate(const ParamStore& store, int client,
                              bool include_self = true);

}  // namespace fedstil
