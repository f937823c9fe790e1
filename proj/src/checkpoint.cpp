#include "fedstil/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace fedstil {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

std::string comparable_config(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  copy.out_dir.clear();
  return serialize_config(copy);
}

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw IoError("save_checkpoint: cannot open " + path);
  }

  void u32(std::uint32_t v) { raw(&v, sizeof(v)); }
  void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
  void i32(std::int32_t v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }

  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void vec(const Vector& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }

  void raw(const void* data, std::size_t size) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  }

  void done() {
    out_.flush();
    if (!out_) throw IoError("save_checkpoint: write failed for " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("load_checkpoint: cannot open " + path);
  }

  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  double f64() { return get<double>(); }

  std::string str() {
    std::string s(u64(), '\0');
    raw(s.data(), s.size());
    return s;
  }

  Vector vec() {
    Vector v(u64());
    raw(v.data(), v.size() * sizeof(double));
    return v;
  }

  void raw(void* data, std::size_t size) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
    if (!in_) throw ParseError("load_checkpoint: truncated file " + path_);
  }

 private:
  template <class T>
  T get() {
    T v;
    raw(&v, sizeof(v));
    return v;
  }

  std::ifstream in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::string& path, const RunState& state,
                     const ExperimentConfig& cfg) {
  Writer w(path);
  w.raw(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.str(comparable_config(cfg));
  w.i32(state.round);

  w.u64(state.clients.size());
  for (const auto& client : state.clients) {
    w.i32(client.id);
    w.vec(client.params.A);
    w.vec(client.params.B);
    w.vec(client.params.alpha);
    w.vec(client.params.A_anchor);
    w.vec(client.params.alpha_anchor);
    w.u64(client.opt.step);
    w.vec(client.opt.mA);
    w.vec(client.opt.vA);
    w.vec(client.opt.mAlpha);
    w.vec(client.opt.vAlpha);
    w.str(client.rng.save_state());
    w.u64(client.memory.next_seq());
    w.u64(client.memory.size());
    for (const auto& [identity, entries] : client.memory.groups()) {
      for (const auto& entry : entries) {
        w.i32(entry.proto.identity);
        w.i32(entry.proto.source_round);
        w.u64(entry.seq);
        w.f64(entry.center_distance);
        w.vec(entry.proto.features);
      }
    }
  }

  std::uint64_t feature_count = 0;
  for (const auto& [client, rounds] : state.history.all()) feature_count += rounds.size();
  w.u64(feature_count);
  for (const auto& [client, rounds] : state.history.all()) {
    for (const auto& [round, feature] : rounds) {
      w.i32(feature.client);
      w.i32(feature.round);
      w.i32(feature.count);
      w.vec(feature.mean);
    }
  }

  w.u64(state.store.all().size());
  for (const auto& [client, upload] : state.store.all()) {
    w.i32(client);
    w.i32(upload.second);
    w.vec(upload.first);
  }

  w.u64(state.ledger.rows.size());
  for (const auto& row : state.ledger.rows) {
    w.i32(row.round);
    w.i32(row.client);
    w.u64(row.s2c_floats);
    w.u64(row.c2s_floats);
  }

  w.u64(state.timeline.all().size());
  for (const auto& [key, eval] : state.timeline.all()) {
    w.i32(std::get<0>(key));
    w.i32(std::get<1>(key));
    w.i32(std::get<2>(key));
    w.f64(eval.map);
    w.f64(eval.rank1);
    w.f64(eval.rank3);
    w.f64(eval.rank5);
  }

  w.u64(state.metric_rows.size());
  for (const auto& row : state.metric_rows) {
    w.i32(row.round);
    w.i32(row.client);
    w.u32(static_cast<std::uint32_t>(row.metric));
    w.i32(row.task_index);
    w.f64(row.value);
  }

  w.u64(state.relevance_rows.size());
  for (const auto& row : state.relevance_rows) {
    w.i32(row.round);
    w.i32(row.client);
    w.i32(row.peer);
    w.f64(row.weight);
  }

  w.done();
}

RunState load_checkpoint(const std::string& path, const ExperimentConfig& cfg) {
  Reader r(path);
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw ParseError("load_checkpoint: bad magic in " + path);
  }
  if (r.u32() != kVersion) {
    throw ParseError("load_checkpoint: unsupported version in " + path);
  }
  if (r.str() != comparable_config(cfg)) {
    throw ConfigError("load_checkpoint: checkpoint " + path +
                      " was produced by a different configuration");
  }

  RunState state;
  state.history = FeatureHistory(cfg.server.window);
  state.round = r.i32();

  const std::uint64_t num_clients = r.u64();
  state.clients.resize(num_clients);
  for (auto& client : state.clients) {
    client.id = r.i32();
    client.shapes = cfg.shapes;
    client.params.A = r.vec();
    client.params.B = r.vec();
    client.params.alpha = r.vec();
    client.params.A_anchor = r.vec();
    client.params.alpha_anchor = r.vec();
    client.opt.step = r.u64();
    client.opt.mA = r.vec();
    client.opt.vA = r.vec();
    client.opt.mAlpha = r.vec();
    client.opt.vAlpha = r.vec();
    client.rng.restore_state(r.str());
    std::uint64_t next_seq = r.u64();
    std::uint64_t entry_count = r.u64();
    for (std::uint64_t i = 0; i < entry_count; ++i) {
      Prototype proto;
      proto.identity = r.i32();
      proto.source_round = r.i32();
      std::uint64_t seq = r.u64();
      double distance = r.f64();
      proto.features = r.vec();
      client.memory.restore_entry(std::move(proto), distance, seq);
    }
    client.memory.set_next_seq(next_seq);
  }

  const std::uint64_t feature_count = r.u64();
  for (std::uint64_t i = 0; i < feature_count; ++i) {
    TaskFeature feature;
    feature.client = r.i32();
    feature.round = r.i32();
    feature.count = r.i32();
    feature.mean = r.vec();
    state.history.record(feature);
  }

  const std::uint64_t upload_count = r.u64();
  for (std::uint64_t i = 0; i < upload_count; ++i) {
    int client = r.i32();
    int round = r.i32();
    state.store.record(client, r.vec(), round);
  }

  const std::uint64_t ledger_count = r.u64();
  for (std::uint64_t i = 0; i < ledger_count; ++i) {
    CommLedger::Row row;
    row.round = r.i32();
    row.client = r.i32();
    row.s2c_floats = r.u64();
    row.c2s_floats = r.u64();
    state.ledger.rows.push_back(row);
  }

  const std::uint64_t timeline_count = r.u64();
  for (std::uint64_t i = 0; i < timeline_count; ++i) {
    int client = r.i32();
    int round = r.i32();
    int task_index = r.i32();
    TaskEval eval;
    eval.map = r.f64();
    eval.rank1 = r.f64();
    eval.rank3 = r.f64();
    eval.rank5 = r.f64();
    state.timeline.record(client, round, task_index, eval);
  }

  const std::uint64_t metric_count = r.u64();
  state.metric_rows.reserve(metric_count);
  for (std::uint64_t i = 0; i < metric_count; ++i) {
    MetricRow row;
    row.round = r.i32();
    row.client = r.i32();
    row.metric = static_cast<MetricId>(r.u32());
    row.task_index = r.i32();
    row.value = r.f64();
    state.metric_rows.push_back(row);
  }

  const std::uint64_t relevance_count = r.u64();
  state.relevance_rows.reserve(relevance_count);
  for (std::uint64_t i = 0; i < relevance_count; ++i) {
    RelevanceLogRow row;
    row.round = r.i32();
    row.client = r.i32();
    row.peer = r.i32();
    row.weight = r.f64();
    state.relevance_rows.push_back(row);
  }

  return state;
}

}  // namespace fedstil
