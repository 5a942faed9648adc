#include "pahi/early_stop.hpp"

#include <cmath>

namespace pahi {

StopDecision EarlyStopMonitor::update(double loss) {
  improved_last_ = !std::isnan(loss) && loss < best_;
  if (improved_last_) {
    best_ = loss;
    since_improvement_ = 0;
  } else {
    ++since_improvement_;
  }
  return since_improvement_ >= patience_ ? StopDecision::stop : StopDecision::proceed;
}

}  // namespace pahi
