#pragma once

#include <stdexcept>
#include <string>

namespace codetect {

// Bad arguments to a library call: shape mismatch, degenerate box, ...
class invalid_input : public std::runtime_error {
 public:
  explicit invalid_input(const std::string& what) : std::runtime_error(what) {}
};

// Unusable run setup: missing files, inconsistent settings, bad config keys.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace codetect
