#ifndef DYMO_EVENTS_H_
#define DYMO_EVENTS_H_

#include <string>
#include <vector>

namespace dymo {

// A non-fatal occurrence worth keeping in a run's record (fallbacks,
// skipped updates, dropped graph nodes). t is -1 outside the sampling loop.
struct Event {
  std::string kind;
  std::string message;
  int t = -1;

  friend bool operator==(const Event&, const Event&) = default;
};

using EventLog = std::vector<Event>;

}  // namespace dymo

#endif  // DYMO_EVENTS_H_
