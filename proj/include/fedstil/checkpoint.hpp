#pragma once

#include <string>

#include "fedstil/runner.hpp"

namespace fedstil {

// Full run-state checkpoint: magic "FSTCKPT1", version, the serialized config
// (out_dir blanked), then every client's parameters, optimizer moments, rng
// state and rehearsal memory, the server stores, the ledger, the timeline and
// the accumulated log rows. Little-endian, fixed field order.
void save_checkpoint(const std::string& path, const RunState& state,
                     const ExperimentConfig& cfg);

// Restores the state; throws ConfigError when the checkpoint was produced by
// a different configuration (out_dir excluded from the comparison).
RunState load_checkpoint(const std::string& path, const ExperimentConfig& cfg);

}  // namespace fedstil
