#pragma once

#include <stdexcept>
#include <string>

namespace qbh {

// Thrown for precondition violations and malformed inputs anywhere in the
// library. The message is meant for end users (the CLI prints it verbatim).
struct Error : public std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace qbh
