#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedstil/numeric.hpp"

namespace fedstil {

struct StreamConfig {
  int num_clients = 5;
  int num_rounds = 6;
  int num_identities = 50;
  int raw_dim = 128;
  int samples_per_identity_per_round = 10;
  double move_prob = 0.5;
  double domain_shift_scale = 0.45;
  double noise_scale = 0.65;
  double query_fraction = 0.4;
  std::uint64_t seed = 42;

  void validate() const;
};

enum class SampleRole { train, query };

struct RawSample {
  Vector features;
  int identity = 0;
  int client = 0;
  int round = 0;
  SampleRole role = SampleRole::train;
};

struct TaskBatch {
  int client = 0;
  int round = 0;
  std::vector<RawSample> train;
  std::vector<RawSample> query;
};

// trajectories[identity][round] = hosting client
using Trajectories = std::vector<std::vector<int>>;

// Ring random walk: each identity starts at a seeded-uniform client and each
// round moves to client c-1 or c+1 (mod num_clients) with probability
// move_prob/2 each, else stays.
Trajectories build_identity_trajectories(const StreamConfig& cfg);

// One TaskBatch per client. Samples are identity_centroid (seeded normal,
// scale 1, fixed per identity) + client domain vector (seeded normal, scale
// domain_shift_scale, fixed per client) + per-sample noise (scale
// noise_scale). Per identity, floor(query_fraction * samples) samples become
// queries, capped so at least one train sample remains; identities that never
// visit another client anywhere in the stream keep all samples as train so
// every query has a cross-client match somewhere. A client with no resident
// identities receives train-only samples of fallback identity
// (client + round) mod num_identities.
std::vector<TaskBatch> generate_round(const StreamConfig& cfg,
                                      const Trajectories& trajectories, int round);

// CSV with header `client,round,role,identity,f0,...,f{d-1}`. Returned
// batches are sorted by (round, client); row order is preserved within each
// batch role.
std::vector<TaskBatch> load_embedding_file(const std::string& path);
void save_embedding_file(const std::string& path, const std::vector<TaskBatch>& batches);

// Order-sensitive FNV-1a digest over every sample field; used to assert that
// different strategies consumed the same stream.
std::uint64_t stream_checksum(const std::vector<TaskBatch>& batches);

}  // namespace fedstil
