#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "fedstil/client.hpp"
#include "fedstil/numeric.hpp"
#include "fedstil/stream.hpp"

namespace fedstil {

struct RetrievalResult {
  double map = 0.0;
  std::map<int, double> rank_at;  // k -> CMC rank-k
  std::size_t valid_queries = 0;
  std::size_t skipped_queries = 0;
};

// Squared-euclidean ranking, ties broken toward the lower gallery index.
// AP = mean over the m-th positive at rank r_m of m / r_m. Queries whose
// identity is absent from the gallery are skipped and counted.
RetrievalResult evaluate_retrieval(const Matrix& emb_q, const std::vector<int>& labels_q,
                                   const Matrix& emb_g, const std::vector<int>& labels_g,
                                   const std::vector<int>& ks);

struct GalleryView {
  Matrix embeddings;
  std::vector<int> labels;
};

// Query-role samples of every client except `querying_client`, projected and
// embedded with the querying client's current theta. Batches are consumed in
// (client, round, sample) order.
GalleryView build_gallery(const std::vector<const TaskBatch*>& batches,
                          int querying_client, const ExtractionLayer& extraction,
                          const ParamVector& theta, const LayerShapes& shapes);

struct TaskEval {
  double map = 0.0;
  double rank1 = 0.0;
  double rank3 = 0.0;
  double rank5 = 0.0;
};

// (client, round, task_index) -> retrieval accuracy of that task under the
// round's model.
class AccuracyTimeline {
 public:
  void record(int client, int round, int task_index, const TaskEval& eval);
  const TaskEval* find(int client, int round, int task_index) const;
  const std::map<std::tuple<int, int, int>, TaskEval>& all() const { return entries_; }

 private:
  std::map<std::tuple<int, int, int>, TaskEval> entries_;
};

// Mean mAP at `round` over every task the client has been evaluated on.
double avg_accuracy(const AccuracyTimeline& timeline, int client, int round);

// Mean over all but the most recent task of (peak mAP up to `round`) minus
// (mAP at `round`).
double forgetting(const AccuracyTimeline& timeline, int client, int round);

struct CommLedger {
  struct Row {
    int round = 0;
    int client = 0;
    std::uint64_t s2c_floats = 0;
    std::uint64_t c2s_floats = 0;
  };
  std::vector<Row> rows;

  std::uint64_t total_s2c_floats() const;
  std::uint64_t total_c2s_floats() const;
  static std::uint64_t bytes(std::uint64_t floats) { return 4 * floats; }
};

// Per participating client: c2s += param_len + feature_len, s2c += param_len.
void account_round(CommLedger& ledger, int round, std::size_t param_len,
                   std::size_t feature_len, const std::vector<int>& participating);

}  // namespace fedstil
