#include "fedstil/stream.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace fedstil {

namespace {

// Sub-seed tags for the independent random streams of the generator.
constexpr std::uint64_t kTrajectoryTag = 0x11;
constexpr std::uint64_t kCentroidTag = 0x22;
constexpr std::uint64_t kDomainTag = 0x33;
constexpr std::uint64_t kNoiseTag = 0x44;

Vector seeded_normal_vector(std::uint64_t seed, int dim, double scale) {
  Rng rng(seed);
  Vector v(static_cast<std::size_t>(dim));
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// True when the identity is hosted by some client other than `client` in any
// round of the stream.
bool appears_elsewhere(const Trajectories& trajectories, int identity, int client) {
  for (int c : trajectories[static_cast<std::size_t>(identity)]) {
    if (c != client) return true;
  }
  return false;
}

}  // namespace

void StreamConfig::validate() const {
  if (num_clients < 1) throw ConfigError("stream: num_clients must be positive");
  if (num_rounds < 0) throw ConfigError("stream: num_rounds must be non-negative");
  if (num_identities < 2 * num_clients) {
    throw ConfigError("stream: num_identities must be at least 2 x num_clients");
  }
  if (raw_dim < 1) throw ConfigError("stream: raw_dim must be positive");
  if (samples_per_identity_per_round < 1) {
    throw ConfigError("stream: samples_per_identity_per_round must be positive");
  }
  if (move_prob < 0.0 || move_prob > 1.0) {
    throw ConfigError("stream: move_prob must be in [0, 1]");
  }
  if (domain_shift_scale < 0.0) throw ConfigError("stream: domain_shift_scale negative");
  if (noise_scale < 0.0) throw ConfigError("stream: noise_scale negative");
  if (!(query_fraction > 0.0) || !(query_fraction < 1.0)) {
    throw ConfigError("stream: query_fraction must be in (0, 1)");
  }
}

Trajectories build_identity_trajectories(const StreamConfig& cfg) {
  cfg.validate();
  Trajectories trajectories(static_cast<std::size_t>(cfg.num_identities));
  for (int id = 0; id < cfg.num_identities; ++id) {
    Rng rng(derive_seed(cfg.seed, kTrajectoryTag, static_cast<std::uint64_t>(id)));
    auto& path = trajectories[static_cast<std::size_t>(id)];
    path.resize(static_cast<std::size_t>(std::max(cfg.num_rounds, 1)));
    int client = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.num_clients)));
    path[0] = client;
    for (int r = 1; r < cfg.num_rounds; ++r) {
      // One draw decides both the move and its direction: [0, p/2) steps
      // forward, [p/2, p) steps back.
      double u = rng.uniform();
      if (u < cfg.move_prob / 2.0) {
        client = (client + 1) % cfg.num_clients;
      } else if (u < cfg.move_prob) {
        client = (client - 1 + cfg.num_clients) % cfg.num_clients;
      }
      path[static_cast<std::size_t>(r)] = client;
    }
  }
  return trajectories;
}

std::vector<TaskBatch> generate_round(const StreamConfig& cfg,
                                      const Trajectories& trajectories, int round) {
  cfg.validate();
  if (round < 0 || round >= cfg.num_rounds) {
    throw RangeError("generate_round: round " + std::to_string(round) +
                     " outside [0, " + std::to_string(cfg.num_rounds) + ")");
  }

  // Residents per client, ascending identity order.
  std::vector<std::vector<int>> residents(static_cast<std::size_t>(cfg.num_clients));
  for (int id = 0; id < cfg.num_identities; ++id) {
    int c = trajectories[static_cast<std::size_t>(id)][static_cast<std::size_t>(round)];
    residents[static_cast<std::size_t>(c)].push_back(id);
  }

  std::vector<TaskBatch> batches(static_cast<std::size_t>(cfg.num_clients));
  const int s = cfg.samples_per_identity_per_round;
  for (int c = 0; c < cfg.num_clients; ++c) {
    TaskBatch& batch = batches[static_cast<std::size_t>(c)];
    batch.client = c;
    batch.round = round;

    Rng noise_rng(derive_seed(cfg.seed, kNoiseTag,
                              static_cast<std::uint64_t>(round) *
                                      static_cast<std::uint64_t>(cfg.num_clients) +
                                  static_cast<std::uint64_t>(c)));
    Vector domain = seeded_normal_vector(
        derive_seed(cfg.seed, kDomainTag, static_cast<std::uint64_t>(c)), cfg.raw_dim,
        cfg.domain_shift_scale);

    auto emit_identity = [&](int id, bool allow_query) {
      Vector centroid = seeded_normal_vector(
          derive_seed(cfg.seed, kCentroidTag, static_cast<std::uint64_t>(id)),
          cfg.raw_dim, 1.0);
      std::vector<RawSample> samples(static_cast<std::size_t>(s));
      for (int k = 0; k < s; ++k) {
        RawSample& sample = samples[static_cast<std::size_t>(k)];
        sample.features.resize(static_cast<std::size_t>(cfg.raw_dim));
        for (int d = 0; d < cfg.raw_dim; ++d) {
          sample.features[static_cast<std::size_t>(d)] =
              centroid[static_cast<std::size_t>(d)] + domain[static_cast<std::size_t>(d)] +
              cfg.noise_scale * noise_rng.normal();
        }
        sample.identity = id;
        sample.client = c;
        sample.round = round;
        sample.role = SampleRole::train;
      }
      int n_query = 0;
      if (allow_query && appears_elsewhere(trajectories, id, c)) {
        n_query = static_cast<int>(cfg.query_fraction * static_cast<double>(s));
        n_query = std::min(n_query, s - 1);
      }
      std::vector<int> order(static_cast<std::size_t>(s));
      std::iota(order.begin(), order.end(), 0);
      noise_rng.shuffle(order);
      for (int k = 0; k < n_query; ++k) {
        samples[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])].role =
            SampleRole::query;
      }
      for (auto& sample : samples) {
        (sample.role == SampleRole::train ? batch.train : batch.query)
            .push_back(std::move(sample));
      }
    };

    for (int id : residents[static_cast<std::size_t>(c)]) emit_identity(id, true);
    if (batch.train.empty() && batch.query.empty()) {
      emit_identity((c + round) % cfg.num_identities, false);
    }
  }
  return batches;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

int parse_int_field(const std::string& text, int line_no, const char* what) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + what + " '" +
                     text + "'");
  }
  return value;
}

double parse_real_field(const std::string& text, int line_no, const char* what) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + what + " '" +
                     text + "'");
  }
  return value;
}

}  // namespace

std::vector<TaskBatch> load_embedding_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_embedding_file: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv_line(line);
  if (header.size() < 5 || header[0] != "client" || header[1] != "round" ||
      header[2] != "role" || header[3] != "identity" || header[4] != "f0") {
    throw ParseError("line 1: expected header client,round,role,identity,f0,...");
  }
  const std::size_t dim = header.size() - 4;
  for (std::size_t d = 0; d < dim; ++d) {
    if (header[4 + d] != "f" + std::to_string(d)) {
      throw ParseError("line 1: feature columns must be f0..f" + std::to_string(dim - 1));
    }
  }

  std::map<std::pair<int, int>, TaskBatch> grouped;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 4 + dim) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(4 + dim) + " fields, got " +
                       std::to_string(fields.size()));
    }
    RawSample sample;
    sample.client = parse_int_field(fields[0], line_no, "client");
    sample.round = parse_int_field(fields[1], line_no, "round");
    if (fields[2] == "train") {
      sample.role = SampleRole::train;
    } else if (fields[2] == "query") {
      sample.role = SampleRole::query;
    } else {
      throw ParseError("line " + std::to_string(line_no) + ": unknown role '" +
                       fields[2] + "'");
    }
    sample.identity = parse_int_field(fields[3], line_no, "identity");
    if (sample.client < 0 || sample.round < 0 || sample.identity < 0) {
      throw ParseError("line " + std::to_string(line_no) + ": negative id field");
    }
    sample.features.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      double x = parse_real_field(fields[4 + d], line_no, "feature");
      if (!std::isfinite(x)) {
        throw ParseError("line " + std::to_string(line_no) + ": non-finite feature");
      }
      sample.features[d] = x;
    }
    auto key = std::make_pair(sample.round, sample.client);
    TaskBatch& batch = grouped[key];
    batch.client = sample.client;
    batch.round = sample.round;
    (sample.role == SampleRole::train ? batch.train : batch.query)
        .push_back(std::move(sample));
  }

  std::vector<TaskBatch> batches;
  batches.reserve(grouped.size());
  for (auto& [key, batch] : grouped) batches.push_back(std::move(batch));
  return batches;
}

void save_embedding_file(const std::string& path, const std::vector<TaskBatch>& batches) {
  std::size_t dim = 0;
  for (const auto& batch : batches) {
    if (!batch.train.empty()) dim = batch.train.front().features.size();
    if (!batch.query.empty()) dim = batch.query.front().features.size();
    if (dim) break;
  }
  std::ofstream out(path);
  if (!out) throw IoError("save_embedding_file: cannot open " + path);
  out << "client,round,role,identity";
  for (std::size_t d = 0; d < dim; ++d) out << ",f" << d;
  out << '\n';

  char buf[32];
  auto write_sample = [&](const RawSample& sample) {
    out << sample.client << ',' << sample.round << ','
        << (sample.role == SampleRole::train ? "train" : "query") << ','
        << sample.identity;
    for (double x : sample.features) {
      std::snprintf(buf, sizeof(buf), "%.17g", x);
      out << ',' << buf;
    }
    out << '\n';
  };
  for (const auto& batch : batches) {
    for (const auto& sample : batch.train) write_sample(sample);
    for (const auto& sample : batch.query) write_sample(sample);
  }
  if (!out) throw IoError("save_embedding_file: write failed for " + path);
}

std::uint64_t stream_checksum(const std::vector<TaskBatch>& batches) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_u64 = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  auto mix_sample = [&](const RawSample& sample) {
    mix_u64(static_cast<std::uint64_t>(sample.client));
    mix_u64(static_cast<std::uint64_t>(sample.round));
    mix_u64(static_cast<std::uint64_t>(sample.identity));
    mix_u64(sample.role == SampleRole::train ? 0 : 1);
    for (double x : sample.features) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof(bits));
      mix_u64(bits);
    }
  };
  for (const auto& batch : batches) {
    mix_u64(static_cast<std::uint64_t>(batch.client));
    mix_u64(static_cast<std::uint64_t>(batch.round));
    for (const auto& sample : batch.train) mix_sample(sample);
    for (const auto& sample : batch.query) mix_sample(sample);
  }
  return h;
}

}  // namespace fedstil
