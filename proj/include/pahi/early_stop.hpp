#pragma once

#include <cstddef>
#include <limits>

namespace pahi {

enum class StopDecision { proceed, stop };

/// Patience-based early stopping on a monitored loss. An evaluation improves
/// only if its loss is strictly below the best so far; NaN never improves.
class EarlyStopMonitor {
 public:
  explicit EarlyStopMonitor(std::size_t patience = 5) : patience_(patience) {}

  StopDecision update(double loss);

  double best() const { return best_; }
  std::size_t since_improvement() const { return since_improvement_; }
  std::size_t patience() const { return patience_; }
  bool improved_last() const { return improved_last_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_improvement_ = 0;
  bool improved_last_ = false;
};

inline StopDecision early_stop_update(EarlyStopMonitor& monitor, double loss) { return monitor.update(loss); }

}  // namespace pahi
