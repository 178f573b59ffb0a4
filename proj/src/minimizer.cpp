#include "heapprobe/minimizer.hpp"

namespace heapprobe {

std::optional<ImpactKey> impact_key(const ImpactReport& report) {
  if (report.outcome != OutcomeKind::Finding || !report.primary) return std::nullopt;
  return ImpactKey{report.primary->impact, report.primary->site};
}

MinimizeResult minimize(std::span<const Action> original, ImpactKey reference,
                        const ImpactOracle& oracle, MinimizeOptions options) {
  MinimizeResult result;
  result.reference = reference;
  result.actions.assign(original.begin(), original.end());
  for (std::size_t i = 0; i < original.size(); ++i) result.kept.push_back(i);

  ++result.evaluations;
  if (oracle(result.actions) != reference) {
    throw FlakyFinding("original trace no longer reproduces its impact");
  }

  for (int pass = 0; pass < options.max_passes; ++pass) {
    ++result.passes;
    bool removed = false;
    std::size_t i = 0;
    while (i < result.actions.size()) {
      auto candidate = result.actions;
      candidate.erase(candidate.begin() + static_cast<std::ptrdiff_t>(i));
      ++result.evaluations;
      if (oracle(candidate) == reference) {
        result.actions = std::move(candidate);
        result.kept.erase(result.kept.begin() + static_cast<std::ptrdiff_t>(i));
        removed = true;
      } else {
        ++i;
      }
    }
    if (!removed) break;
  }

  ++result.evaluations;
  if (oracle(result.actions) != reference) {
    throw FlakyFinding("minimized trace failed re-validation");
  }
  return result;
}

ImpactOracle process_oracle(Runner& runner, Word salt) {
  return [&runner, salt](std::span<const Action> actions) -> std::optional<ImpactKey> {
    const auto bytes = encode(actions, runner.config().spec);
    return impact_key(runner.run(bytes, salt));
  };
}

}  // namespace heapprobe
