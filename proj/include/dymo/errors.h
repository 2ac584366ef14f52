#ifndef DYMO_ERRORS_H_
#define DYMO_ERRORS_H_

#include <stdexcept>
#include <string>

namespace dymo {

// Invalid configuration value. The message names the offending parameter.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed caller input (empty prompt, shape mismatch, bad selection).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Diffusion step or table index outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// NaN/Inf, underflow or divergence in a numerical routine.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint or container format problems.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dymo

#endif  // DYMO_ERRORS_H_
