#include "fedstil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fedstil {

RetrievalResult evaluate_retrieval(const Matrix& emb_q, const std::vector<int>& labels_q,
                                   const Matrix& emb_g, const std::vector<int>& labels_g,
                                   const std::vector<int>& ks) {
  if (emb_q.rows != labels_q.size() || emb_g.rows != labels_g.size()) {
    throw DimensionError("evaluate_retrieval: label counts disagree with embeddings");
  }
  if (emb_q.rows == 0) throw EmptyEvalError("evaluate_retrieval: no queries");
  if (emb_g.rows == 0) throw EmptyEvalError("evaluate_retrieval: empty gallery");

  Matrix dist = pairwise_sq_euclidean(emb_q, emb_g);

  const std::size_t nq = emb_q.rows;
  const std::size_t ng = emb_g.rows;
  std::vector<double> ap(nq, 0.0);
  std::vector<char> valid(nq, 0);
  // hit_rank[q] = 1-based rank of the first positive, 0 when skipped.
  std::vector<std::size_t> hit_rank(nq, 0);

  const std::int64_t nq_i = static_cast<std::int64_t>(nq);
#pragma omp parallel for if (nq * ng > 4096)
  for (std::int64_t qi = 0; qi < nq_i; ++qi) {
    const std::size_t q = static_cast<std::size_t>(qi);
    const int label = labels_q[q];
    std::size_t positives = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      if (labels_g[g] == label) ++positives;
    }
    if (positives == 0) continue;

    std::vector<std::size_t> order(ng);
    std::iota(order.begin(), order.end(), 0);
    const double* drow = dist.row(q);
    std::sort(order.begin(), order.end(), [drow](std::size_t a, std::size_t b) {
      if (drow[a] != drow[b]) return drow[a] < drow[b];
      return a < b;
    });

    double sum = 0.0;
    std::size_t found = 0;
    for (std::size_t r = 0; r < ng && found < positives; ++r) {
      if (labels_g[order[r]] == label) {
        ++found;
        sum += static_cast<double>(found) / static_cast<double>(r + 1);
        if (found == 1) hit_rank[q] = r + 1;
      }
    }
    ap[q] = sum / static_cast<double>(positives);
    valid[q] = 1;
  }

  RetrievalResult result;
  double ap_sum = 0.0;
  for (std::size_t q = 0; q < nq; ++q) {
    if (valid[q]) {
      ++result.valid_queries;
      ap_sum += ap[q];
    } else {
      ++result.skipped_queries;
    }
  }
  if (result.valid_queries == 0) {
    throw EmptyEvalError("evaluate_retrieval: no query identity appears in the gallery");
  }
  result.map = ap_sum / static_cast<double>(result.valid_queries);

  for (int k : ks) {
    std::size_t hits = 0;
    for (std::size_t q = 0; q < nq; ++q) {
      if (valid[q] && hit_rank[q] <= static_cast<std::size_t>(k)) ++hits;
    }
    result.rank_at[k] =
        static_cast<double>(hits) / static_cast<double>(result.valid_queries);
  }
  return result;
}

GalleryView build_gallery(const std::vector<const TaskBatch*>& batches,
                          int querying_client, const ExtractionLayer& extraction,
                          const ParamVector& theta, const LayerShapes& shapes) {
  std::vector<const TaskBatch*> ordered = batches;
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const TaskBatch* a, const TaskBatch* b) {
                     if (a->client != b->client) return a->client < b->client;
                     return a->round < b->round;
                   });

  std::vector<const RawSample*> samples;
  for (const TaskBatch* batch : ordered) {
    if (batch->client == querying_client) continue;
    for (const auto& sample : batch->query) samples.push_back(&sample);
  }
  if (samples.empty()) throw EmptyEvalError("build_gallery: empty gallery");

  Matrix projected(samples.size(), shapes.proto_dim);
  std::vector<int> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Vector p = project_features(extraction, samples[i]->features);
    std::copy(p.begin(), p.end(), projected.row(i));
    labels[i] = samples[i]->identity;
  }
  ForwardCache cache = forward(theta, shapes, projected);

  GalleryView view;
  view.embeddings = std::move(cache.hidden);
  view.labels = std::move(labels);
  return view;
}

void AccuracyTimeline::record(int client, int round, int task_index,
                              const TaskEval& eval) {
  entries_[{client, round, task_index}] = eval;
}

const TaskEval* AccuracyTimeline::find(int client, int round, int task_index) const {
  auto it = entries_.find({client, round, task_index});
  return it == entries_.end() ? nullptr : &it->second;
}

double avg_accuracy(const AccuracyTimeline& timeline, int client, int round) {
  double sum = 0.0;
  int count = 0;
  for (const auto& [key, eval] : timeline.all()) {
    if (std::get<0>(key) == client && std::get<1>(key) == round) {
      sum += eval.map;
      ++count;
    }
  }
  if (count == 0) {
    throw EmptyEvalError("avg_accuracy: client " + std::to_string(client) +
                         " has no evaluations at round " + std::to_string(round));
  }
  return sum / static_cast<double>(count);
}

double forgetting(const AccuracyTimeline& timeline, int client, int round) {
  // Tasks evaluated at `round`, ascending task index.
  std::vector<std::pair<int, double>> current;
  for (const auto& [key, eval] : timeline.all()) {
    if (std::get<0>(key) == client && std::get<1>(key) == round) {
      current.emplace_back(std::get<2>(key), eval.map);
    }
  }
  if (current.size() < 2) {
    throw UndefinedForgettingError("forgetting: client " + std::to_string(client) +
                                   " has fewer than 2 tasks at round " +
                                   std::to_string(round));
  }
  std::sort(current.begin(), current.end());
  // The most recent task has no forgetting yet.
  current.pop_back();

  double sum = 0.0;
  for (const auto& [task_index, now] : current) {
    double peak = now;
    for (const auto& [key, eval] : timeline.all()) {
      if (std::get<0>(key) == client && std::get<2>(key) == task_index &&
          std::get<1>(key) <= round) {
        peak = std::max(peak, eval.map);
      }
    }
    sum += peak - now;
  }
  return sum / static_cast<double>(current.size());
}

std::uint64_t CommLedger::total_s2c_floats() const {
  std::uint64_t total = 0;
  for (const auto& row : rows) total += row.s2c_floats;
  return total;
}

std::uint64_t CommLedger::total_c2s_floats() const {
  std::uint64_t total = 0;
  for (const auto& row : rows) total += row.c2s_floats;
  return total;
}

void account_round(CommLedger& ledger, int round, std::size_t param_len,
                   std::size_t feature_len, const std::vector<int>& participating) {
  for (int client : participating) {
    CommLedger::Row row;
    row.round = round;
    row.client = client;
    row.c2s_floats = param_len + feature_len;
    row.s2c_floats = param_len;
    ledger.rows.push_back(row);
  }
}

}  // namespace fedstil
