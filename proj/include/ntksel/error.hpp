#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace ntksel {

enum class ErrorCode {
  config,
  dim_mismatch,
  non_finite_value,
  duplicate_id,
  io,
  bad_magic,
  bad_kind,
  truncated_file,
  trailing_data,
  seed_mismatch,
  normalization_mismatch,
  missing_feature,
  overlap,
  coverage,
  non_finite_gradient,
  size_cap_exceeded,
  no_hidden_layer,
  divergence,
  degenerate_variance,
  zero_norm,
  empty_candidates,
  m_too_large,
  n_too_large,
  empty_matrix,
  negative_cosine,
  sparse_checkpoints,
  singular_system,
  asymmetric_kernel,
  demo_assertion_failed,
  identity_check_failed,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the engine. The code identifies the violated
/// contract; the message carries the specifics (paths, sizes, indices).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 protected:
  struct Verbatim {};
  Error(ErrorCode code, const std::string& message, Verbatim) : std::runtime_error(message), code_(code) {}

 private:
  ErrorCode code_;
};

/// Raised by run_pipeline; wraps the failing stage's error.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& inner)
      : Error(inner.code(), "stage '" + stage + "': " + inner.what(), Verbatim{}),
        stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace ntksel
