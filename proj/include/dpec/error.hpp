#pragma once

#include <stdexcept>
#include <string>

namespace dpec {

enum class ErrorCode {
  ShapeMismatch,
  DivisionDomain,
  AxisOutOfRange,
  NonScalarRoot,
  NonFiniteInput,
  MissingDenoiser,
  MissingStage1Checkpoint,
  NonFiniteLoss,
  IoError,
  UnsupportedFormat,
  PairingError,
  StageUnavailable,
  ConfigError,
  CheckpointError,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dpec
