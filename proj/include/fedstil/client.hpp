#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "fedstil/model.hpp"
#include "fedstil/numeric.hpp"
#include "fedstil/stream.hpp"

namespace fedstil {

// Frozen random projection standing in for shared pre-trained extraction
// weights; identical on every client for the whole experiment.
struct ExtractionLayer {
  Matrix projection;  // raw_dim x proto_dim
};

ExtractionLayer make_extraction_layer(int raw_dim, int proto_dim, std::uint64_t seed);

struct Prototype {
  Vector features;  // proto_dim
  int identity = 0;
  int source_round = 0;
};

struct MemoryConfig {
  std::size_t budget = 512;
  std::size_t per_identity_quota = 4;
};

// Bounded prototype store grouped by identity. Admission keeps, per task
// identity, the prototypes whose embeddings are nearest that identity's
// embedding center. When over budget, the largest identity group (ties:
// lowest identity id) evicts its farthest-from-center entry (ties: newest).
class RehearsalMemory {
 public:
  struct Entry {
    Prototype proto;
    double center_distance = 0.0;
    std::uint64_t seq = 0;
  };

  void admit(Prototype proto, double center_distance, std::size_t budget);
  std::size_t size() const { return total_; }
  bool empty() const { return total_ == 0; }
  const std::map<int, std::vector<Entry>>& groups() const { return groups_; }

  // Flat view in (identity, insertion) order; stable for a given content.
  std::vector<const Prototype*> flatten() const;

  std::uint64_t next_seq() const { return next_seq_; }
  void restore_entry(Prototype proto, double center_distance, std::uint64_t seq);
  void set_next_seq(std::uint64_t seq) { next_seq_ = seq; }

 private:
  void evict_one();

  std::map<int, std::vector<Entry>> groups_;
  std::size_t total_ = 0;
  std::uint64_t next_seq_ = 0;
};

struct ClientState {
  int id = 0;
  LayerShapes shapes;
  AdaptiveParams params;
  AdamState opt;
  RehearsalMemory memory;
  Rng rng{0};
};

// Mean prototype of one task; the only data summary a client shares.
struct TaskFeature {
  Vector mean;
  int client = 0;
  int round = 0;
  int count = 0;
};

// projection^T * raw for every train sample, labels preserved. Query samples
// are projected on demand at evaluation time.
std::vector<Prototype> extract_prototypes(const ExtractionLayer& layer,
                                          const TaskBatch& batch);
Vector project_features(const ExtractionLayer& layer, const Vector& raw);

TaskFeature task_feature(const std::vector<Prototype>& prototypes, int client,
                         int round);

// Embeds the task prototypes with the client's composed parameters and
// admits the nearest-to-center quota per identity.
void update_memory(ClientState& state, const std::vector<Prototype>& task,
                   const MemoryConfig& cfg);

struct SampledBatch {
  std::vector<const Prototype*> items;
  std::size_t from_memory = 0;
};

// ceil(rehearsal_fraction * batch_size) draws from memory (falling back to
// the current task when memory is empty), remainder from the current task.
// Pools smaller than their quota are drawn with replacement.
SampledBatch sample_training_batch(const RehearsalMemory& memory,
                                   const std::vector<Prototype>& current,
                                   std::size_t batch_size, double rehearsal_fraction,
                                   Rng& rng);

// Debug dump in the embedding-file CSV format; rows carry the prototype's
// source round and train role.
void dump_memory_csv(const std::string& path, const RehearsalMemory& memory,
                     int client);

struct TrainConfig {
  int epochs = 5;
  std::size_t batch_size = 32;
  double rehearsal_fraction = 0.3;
  double tie_weight = 1.0;
  int patience = 3;
  bool train_alpha = true;
  AdamConfig adam;
};

struct TrainResult {
  ParamVector theta;  // composed upload
  std::vector<double> epoch_losses;
};

// Installs `base` as B, snapshots the tying anchors, then runs
// epochs x ceil(|task| / batch_size) optimizer steps with rehearsal
// mixing, stopping early once the best epoch loss has not improved for
// `patience` consecutive epochs.
TrainResult train_local(ClientState& state, const std::vector<Prototype>& task,
                        const ParamVector& base, const TrainConfig& cfg);

}  // namespace fedstil
