#include "fedstil/server.hpp"

#include <algorithm>
#include <cmath>

namespace fedstil {

void FeatureHistory::record(const TaskFeature& feature) {
  auto& rounds = features_[feature.client];
  if (!rounds.empty() && feature.round < rounds.rbegin()->first) {
    throw OrderingError("FeatureHistory::record: round " +
                        std::to_string(feature.round) + " after round " +
                        std::to_string(rounds.rbegin()->first) + " for client " +
                        std::to_string(feature.client));
  }
  rounds[feature.round] = feature;
  // Keep the last window+1 rounds: [latest - window, latest].
  int latest = rounds.rbegin()->first;
  for (auto it = rounds.begin(); it != rounds.end();) {
    if (it->first < latest - window_) {
      it = rounds.erase(it);
    } else {
      break;
    }
  }
}

const std::map<int, TaskFeature>* FeatureHistory::rounds_for(int client) const {
  auto it = features_.find(client);
  return it == features_.end() ? nullptr : &it->second;
}

bool FeatureHistory::has(int client, int round) const {
  const auto* rounds = rounds_for(client);
  return rounds && rounds->count(round) != 0;
}

const TaskFeature& FeatureHistory::at(int client, int round) const {
  const auto* rounds = rounds_for(client);
  if (!rounds) {
    throw MissingFeatureError("FeatureHistory: no features for client " +
                              std::to_string(client));
  }
  auto it = rounds->find(round);
  if (it == rounds->end()) {
    throw MissingFeatureError("FeatureHistory: client " + std::to_string(client) +
                              " has no feature for round " + std::to_string(round));
  }
  return it->second;
}

void ParamStore::record(int client, ParamVector theta, int round) {
  auto it = uploads_.find(client);
  if (it != uploads_.end() && round < it->second.second) {
    throw OrderingError("ParamStore::record: round " + std::to_string(round) +
                        " after round " + std::to_string(it->second.second) +
                        " for client " + std::to_string(client));
  }
  if (!uploads_.empty()) {
    std::size_t expected = uploads_.begin()->second.first.size();
    if (theta.size() != expected) {
      throw DimensionError("ParamStore::record: theta length " +
                           std::to_string(theta.size()) + " vs stored " +
                           std::to_string(expected));
    }
  }
  uploads_[client] = {std::move(theta), round};
}

const ParamVector& ParamStore::theta(int client) const {
  auto it = uploads_.find(client);
  if (it == uploads_.end()) {
    throw MissingParamsError("ParamStore: no upload from client " +
                             std::to_string(client));
  }
  return it->second.first;
}

int ParamStore::upload_round(int client) const {
  auto it = uploads_.find(client);
  if (it == uploads_.end()) {
    throw MissingParamsError("ParamStore: no upload from client " +
                             std::to_string(client));
  }
  return it->second.second;
}

std::vector<int> ParamStore::clients() const {
  std::vector<int> ids;
  ids.reserve(uploads_.size());
  for (const auto& [client, unused] : uploads_) ids.push_back(client);
  return ids;
}

double task_similarity(const TaskFeature& f_i, const TaskFeature& f_j,
                       double temperature) {
  if (f_i.mean.size() != f_j.mean.size()) {
    throw DimensionError("task_similarity: feature widths " +
                         std::to_string(f_i.mean.size()) + " vs " +
                         std::to_string(f_j.mean.size()));
  }
  ProbVector p = softmax(f_i.mean, temperature);
  ProbVector q = softmax(f_j.mean, temperature);
  return std::exp(-kl_divergence(p, q));
}

RelevanceRow knowledge_relevance(const FeatureHistory& history, int client, int round,
                                 double lambda_f, int window, double temperature,
                                 bool include_self) {
  if (!history.has(client, round)) {
    throw MissingFeatureError("knowledge_relevance: client " + std::to_string(client) +
                              " has no feature for round " + std::to_string(round));
  }
  const TaskFeature& anchor = history.at(client, round);

  RelevanceRow row;
  row.client = client;
  row.round = round;
  const int first = std::max(0, round - window);
  for (const auto& [peer, rounds] : history.all()) {
    if (peer == client && !include_self) continue;
    double raw = 0.0;
    bool any = false;
    for (const auto& [t_prime, feature] : rounds) {
      if (t_prime < first || t_prime > round) continue;
      raw += std::pow(lambda_f, static_cast<double>(round - t_prime)) *
             task_similarity(anchor, feature, temperature);
      any = true;
    }
    if (any) row.raw[peer] = raw;
  }

  double sum = 0.0;
  for (const auto& [peer, raw] : row.raw) sum += raw;
  if (sum > 0.0) {
    for (const auto& [peer, raw] : row.raw) row.weights[peer] = raw / sum;
  }
  return row;
}

RelevanceRow restrict_row(const RelevanceRow& row, const std::vector<int>& eligible) {
  RelevanceRow out;
  out.client = row.client;
  out.round = row.round;
  for (int peer : eligible) {
    auto it = row.raw.find(peer);
    if (it != row.raw.end()) out.raw[peer] = it->second;
  }
  double sum = 0.0;
  for (const auto& [peer, raw] : out.raw) sum += raw;
  if (sum > 0.0) {
    for (const auto& [peer, raw] : out.raw) out.weights[peer] = raw / sum;
  }
  return out;
}

ParamVector aggregate_base(const ParamStore& store, const RelevanceRow& row,
                           std::size_t param_len) {
  if (row.weights.empty()) return ParamVector(param_len, 0.0);

  std::vector<std::pair<double, const ParamVector*>> terms;
  terms.reserve(row.weights.size());
  for (const auto& [peer, weight] : row.weights) {
    if (!store.has(peer)) {
      throw MissingParamsError("aggregate_base: no stored upload for weighted client " +
                               std::to_string(peer));
    }
    const ParamVector& theta = store.theta(peer);
    if (theta.size() != param_len) {
      throw DimensionError("aggregate_base: stored theta length mismatch");
    }
    terms.emplace_back(weight, &theta);
  }

  ParamVector base(param_len, 0.0);
  const std::int64_t n = static_cast<std::int64_t>(param_len);
#pragma omp parallel for if (param_len > 8192)
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (const auto& [weight, theta] : terms) acc += weight * (*theta)[i];
    base[i] = acc;
  }
  return base;
}

ParamVector uniform_aggregate(const ParamStore& store, int client, bool include_self) {
  std::vector<const ParamVector*> terms;
  for (const auto& [peer, upload] : store.all()) {
    if (peer == client && !include_self) continue;
    terms.push_back(&upload.first);
  }
  if (terms.empty()) {
    throw MissingParamsError("uniform_aggregate: no eligible uploads for client " +
                             std::to_string(client));
  }
  const std::size_t param_len = terms.front()->size();
  const double w = 1.0 / static_cast<double>(terms.size());
  ParamVector base(param_len, 0.0);
  const std::int64_t n = static_cast<std::int64_t>(param_len);
#pragma omp parallel for if (param_len > 8192)
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (const ParamVector* theta : terms) acc += (*theta)[i];
    base[i] = acc * w;
  }
  return base;
}

}  // namespace fedstil
