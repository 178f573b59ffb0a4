#pragma once

// Action-level delta debugging: drop one action at a time and keep the
// removal when the trace still yields the same primary (impact, site).

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "heapprobe/codec.hpp"
#include "heapprobe/report.hpp"
#include "heapprobe/runner.hpp"

namespace heapprobe {

using ImpactKey = std::pair<ImpactClass, Site>;

/// Primary (impact, site) of a candidate, or nullopt for no impact, crash,
/// or timeout.
using ImpactOracle = std::function<std::optional<ImpactKey>(std::span<const Action>)>;

class FlakyFinding : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MinimizeOptions {
  int max_passes = 8;
};

struct MinimizeResult {
  std::vector<Action> actions;
  std::vector<std::size_t> kept;  // indices into the original trace
  ImpactKey reference;
  int passes = 0;
  std::size_t evaluations = 0;
};

std::optional<ImpactKey> impact_key(const ImpactReport& report);

/// Throws FlakyFinding when `original` does not reproduce `reference`, or
/// when the final result fails re-validation.
MinimizeResult minimize(std::span<const Action> original, ImpactKey reference,
                        const ImpactOracle& oracle, MinimizeOptions options = {});

/// Oracle that encodes each candidate and runs it in a fresh worker.
ImpactOracle process_oracle(Runner& runner, Word salt);

}  // namespace heapprobe
