#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace spindle {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid pipeline, stage, or tool configuration, detected before anything runs.
class ConfigError : public Error {
  using Error::Error;
};

// Malformed frame, bad opcode, or handshake mismatch on the subprocess wire.
class ProtocolError : public Error {
  using Error::Error;
};

// Surfaced by Pipeline::next() after a fail_fast stage aborted the run.
class PipelineError : public Error {
 public:
  PipelineError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' aborted the pipeline: " + what), stage_(std::move(stage)) {}

  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace spindle
