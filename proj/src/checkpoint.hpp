#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flow.hpp"

namespace resflow {

inline constexpr int kCheckpointVersion = 1;

// Everything needed to rebuild a run's model. Reals are stored as C99
// hexfloats, so save -> load -> save is byte-identical.
struct Checkpoint {
    FlowModel model;
    std::vector<double> polyak_shadow;  // empty when absent
    long long step = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> config;

    // Polyak-averaged parameters when present (constraints re-applied),
    // otherwise the raw model.
    FlowModel eval_model() const;
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(const std::string& text);

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace resflow
