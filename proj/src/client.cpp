#include "fedstil/client.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fedstil {

ExtractionLayer make_extraction_layer(int raw_dim, int proto_dim, std::uint64_t seed) {
  Rng rng(seed);
  Matrix projection(static_cast<std::size_t>(raw_dim), static_cast<std::size_t>(proto_dim));
  // Scaled so projected features keep roughly unit variance.
  double scale = 1.0 / std::sqrt(static_cast<double>(raw_dim));
  for (double& x : projection.values) x = scale * rng.normal();
  return ExtractionLayer{std::move(projection)};
}

Vector project_features(const ExtractionLayer& layer, const Vector& raw) {
  if (raw.size() != layer.projection.rows) {
    throw DimensionError("project_features: raw width " + std::to_string(raw.size()) +
                         " vs projection rows " + std::to_string(layer.projection.rows));
  }
  Vector out(layer.projection.cols, 0.0);
  for (std::size_t i = 0; i < layer.projection.rows; ++i) {
    const double xi = raw[i];
    if (xi == 0.0) continue;
    const double* row = layer.projection.row(i);
    for (std::size_t j = 0; j < layer.projection.cols; ++j) out[j] += xi * row[j];
  }
  return out;
}

std::vector<Prototype> extract_prototypes(const ExtractionLayer& layer,
                                          const TaskBatch& batch) {
  std::vector<Prototype> prototypes;
  prototypes.reserve(batch.train.size());
  for (const auto& sample : batch.train) {
    Prototype p;
    p.features = project_features(layer, sample.features);
    p.identity = sample.identity;
    p.source_round = sample.round;
    prototypes.push_back(std::move(p));
  }
  return prototypes;
}

TaskFeature task_feature(const std::vector<Prototype>& prototypes, int client,
                         int round) {
  if (prototypes.empty()) throw EmptyTaskError("task_feature: no prototypes");
  TaskFeature f;
  f.mean.assign(prototypes.front().features.size(), 0.0);
  for (const auto& p : prototypes) {
    if (p.features.size() != f.mean.size()) {
      throw DimensionError("task_feature: inconsistent prototype widths");
    }
    for (std::size_t d = 0; d < f.mean.size(); ++d) f.mean[d] += p.features[d];
  }
  for (double& x : f.mean) x /= static_cast<double>(prototypes.size());
  f.client = client;
  f.round = round;
  f.count = static_cast<int>(prototypes.size());
  return f;
}

void RehearsalMemory::admit(Prototype proto, double center_distance,
                            std::size_t budget) {
  Entry entry{std::move(proto), center_distance, next_seq_++};
  groups_[entry.proto.identity].push_back(std::move(entry));
  ++total_;
  while (total_ > budget) evict_one();
}

void RehearsalMemory::restore_entry(Prototype proto, double center_distance,
                                    std::uint64_t seq) {
  groups_[proto.identity].push_back(Entry{std::move(proto), center_distance, seq});
  ++total_;
}

void RehearsalMemory::evict_one() {
  // Largest group first, ties to the lowest identity id.
  auto victim_group = groups_.begin();
  for (auto it = groups_.begin(); it != groups_.end(); ++it) {
    if (it->second.size() > victim_group->second.size()) victim_group = it;
  }
  auto& entries = victim_group->second;
  // Farthest-from-center entry, ties to the newest.
  std::size_t victim = 0;
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].center_distance > entries[victim].center_distance ||
        (entries[i].center_distance == entries[victim].center_distance &&
         entries[i].seq > entries[victim].seq)) {
      victim = i;
    }
  }
  entries.erase(entries.begin() + static_cast<std::ptrdiff_t>(victim));
  --total_;
  if (entries.empty()) groups_.erase(victim_group);
}

std::vector<const Prototype*> RehearsalMemory::flatten() const {
  std::vector<const Prototype*> out;
  out.reserve(total_);
  for (const auto& [identity, entries] : groups_) {
    for (const auto& entry : entries) out.push_back(&entry.proto);
  }
  return out;
}

void update_memory(ClientState& state, const std::vector<Prototype>& task,
                   const MemoryConfig& cfg) {
  if (task.empty()) return;

  Matrix inputs(task.size(), state.shapes.proto_dim);
  for (std::size_t i = 0; i < task.size(); ++i) {
    if (task[i].features.size() != state.shapes.proto_dim) {
      throw DimensionError("update_memory: prototype width mismatch");
    }
    std::copy(task[i].features.begin(), task[i].features.end(), inputs.row(i));
  }
  ParamVector theta = compose(state.params);
  ForwardCache cache = forward(theta, state.shapes, inputs);

  // Embedding center per identity, then distance of each prototype to its
  // identity's center.
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < task.size(); ++i) {
    by_identity[task[i].identity].push_back(i);
  }
  const std::size_t hd = state.shapes.hidden_dim;
  for (const auto& [identity, indices] : by_identity) {
    Vector center(hd, 0.0);
    for (std::size_t idx : indices) {
      const double* h = cache.hidden.row(idx);
      for (std::size_t j = 0; j < hd; ++j) center[j] += h[j];
    }
    for (double& x : center) x /= static_cast<double>(indices.size());

    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(indices.size());
    for (std::size_t idx : indices) {
      const double* h = cache.hidden.row(idx);
      double dist = 0.0;
      for (std::size_t j = 0; j < hd; ++j) {
        double diff = h[j] - center[j];
        dist += diff * diff;
      }
      ranked.emplace_back(dist, idx);
    }
    // Ties keep task order.
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::size_t keep = std::min(cfg.per_identity_quota, ranked.size());
    for (std::size_t k = 0; k < keep; ++k) {
      state.memory.admit(task[ranked[k].second], ranked[k].first, cfg.budget);
    }
  }
}

SampledBatch sample_training_batch(const RehearsalMemory& memory,
                                   const std::vector<Prototype>& current,
                                   std::size_t batch_size, double rehearsal_fraction,
                                   Rng& rng) {
  if (batch_size == 0) throw InvalidInputError("sample_training_batch: zero batch");
  if (rehearsal_fraction < 0.0 || rehearsal_fraction >= 1.0) {
    throw InvalidInputError("sample_training_batch: rehearsal fraction outside [0, 1)");
  }
  if (memory.empty() && current.empty()) {
    throw EmptyTaskError("sample_training_batch: both pools empty");
  }

  std::size_t want_memory =
      static_cast<std::size_t>(std::ceil(rehearsal_fraction * static_cast<double>(batch_size)));
  if (memory.empty()) want_memory = 0;
  if (current.empty()) want_memory = batch_size;

  SampledBatch batch;
  batch.items.reserve(batch_size);

  auto draw_from = [&rng](const std::vector<const Prototype*>& pool, std::size_t count,
                          std::vector<const Prototype*>& out) {
    if (count == 0) return;
    if (pool.size() < count) {
      for (std::size_t k = 0; k < count; ++k) {
        out.push_back(pool[rng.uniform_int(pool.size())]);
      }
    } else {
      // Partial Fisher-Yates over an index array: first `count` slots are a
      // uniform sample without replacement.
      std::vector<std::size_t> order(pool.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t k = 0; k < count; ++k) {
        std::size_t j = k + rng.uniform_int(order.size() - k);
        std::swap(order[k], order[j]);
        out.push_back(pool[order[k]]);
      }
    }
  };

  std::vector<const Prototype*> memory_pool = memory.flatten();
  draw_from(memory_pool, want_memory, batch.items);
  batch.from_memory = batch.items.size();

  std::vector<const Prototype*> current_pool;
  current_pool.reserve(current.size());
  for (const auto& p : current) current_pool.push_back(&p);
  if (current_pool.empty()) current_pool = memory_pool;
  draw_from(current_pool, batch_size - batch.items.size(), batch.items);
  return batch;
}

void dump_memory_csv(const std::string& path, const RehearsalMemory& memory,
                     int client) {
  std::map<int, TaskBatch> by_round;
  for (const auto& [identity, entries] : memory.groups()) {
    for (const auto& entry : entries) {
      TaskBatch& batch = by_round[entry.proto.source_round];
      batch.client = client;
      batch.round = entry.proto.source_round;
      RawSample sample;
      sample.features = entry.proto.features;
      sample.identity = entry.proto.identity;
      sample.client = client;
      sample.round = entry.proto.source_round;
      sample.role = SampleRole::train;
      batch.train.push_back(std::move(sample));
    }
  }
  std::vector<TaskBatch> batches;
  batches.reserve(by_round.size());
  for (auto& [round, batch] : by_round) batches.push_back(std::move(batch));
  save_embedding_file(path, batches);
}

TrainResult train_local(ClientState& state, const std::vector<Prototype>& task,
                        const ParamVector& base, const TrainConfig& cfg) {
  if (task.empty()) throw EmptyTaskError("train_local: empty task");
  if (base.size() != state.params.B.size()) {
    throw DimensionError("train_local: base length " + std::to_string(base.size()) +
                         " vs " + std::to_string(state.params.B.size()));
  }

  state.params.B = base;
  snapshot_anchors(state.params);

  const std::size_t steps_per_epoch =
      (task.size() + cfg.batch_size - 1) / cfg.batch_size;
  TrainResult result;
  double best_loss = std::numeric_limits<double>::infinity();
  int stall = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      SampledBatch batch = sample_training_batch(state.memory, task, cfg.batch_size,
                                                 cfg.rehearsal_fraction, state.rng);
      Matrix inputs(batch.items.size(), state.shapes.proto_dim);
      std::vector<int> labels(batch.items.size());
      for (std::size_t i = 0; i < batch.items.size(); ++i) {
        std::copy(batch.items[i]->features.begin(), batch.items[i]->features.end(),
                  inputs.row(i));
        labels[i] = batch.items[i]->identity;
      }
      LossGrad lg = loss_and_grad(state.params, state.shapes, inputs, labels,
                                  cfg.tie_weight);
      adam_step(state.params, lg.grad_a, lg.grad_alpha, state.opt, cfg.adam,
                cfg.train_alpha);
      epoch_loss += lg.loss;
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);
    result.epoch_losses.push_back(epoch_loss);

    if (epoch_loss < best_loss) {
      best_loss = epoch_loss;
      stall = 0;
    } else {
      ++stall;
      if (stall >= cfg.patience) break;
    }
  }

  result.theta = compose(state.params);
  return result;
}

}  // namespace fedstil
