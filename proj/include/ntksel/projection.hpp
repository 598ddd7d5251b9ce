#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "ntksel/error.hpp"

namespace ntksel {

enum class ScaleMode { raw, jl_scaled };

/// Implicit Rademacher matrix of shape source_dim x target_dim. Entries
/// are +1/-1 (raw) or +-1/sqrt(target_dim) (jl_scaled).
struct ProjectionSpec {
  std::uint64_t seed = 0;
  std::uint64_t source_dim = 0;
  std::uint32_t target_dim = 0;
  ScaleMode scale_mode = ScaleMode::raw;
};

// Sign generator. Row i of the matrix is cut into 64-column blocks; block b
// is one 64-bit word
//
//   word(seed, i, b) = mix(mix(mix(seed) ^ i) ^ b)
//
// where mix is the SplitMix64 step (add 0x9e3779b97f4a7c15, then the
// 30/27/31 xor-shift-multiply finaliser). Bit (k mod 64) of word(seed, i,
// k / 64) set means entry (i, k) is -1, clear means +1. Test vectors are in
// docs/format.md; exporters must reproduce them exactly.
std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t sign_word(std::uint64_t seed, std::uint64_t row, std::uint64_t block) noexcept;
int rademacher_sign(std::uint64_t seed, std::uint64_t row, std::uint64_t col) noexcept;

/// Rows are folded in canonical blocks of this many rows; partial sums are
/// combined in ascending block order, which makes chunked projection exact
/// regardless of how the input is partitioned.
inline constexpr std::uint64_t kProjectionRowBlock = 4096;

/// out[k] = sum_i Pi[i,k] * g[i], 64-bit accumulation.
std::vector<double> project(const ProjectionSpec& spec, std::span<const double> g);

/// Accepts slices of g in any order; each index in [0, source_dim) must be
/// covered exactly once. Rows belonging to a canonical block are buffered
/// until that block is complete, and completed blocks are folded in order,
/// so in-order streaming holds O(target_dim + block) memory.
class ChunkedProjector {
 public:
  explicit ChunkedProjector(const ProjectionSpec& spec);

  void add(std::uint64_t offset, std::span<const double> slice);
  std::vector<double> finish();

 private:
  struct PendingBlock {
    std::vector<double> values;
    std::vector<bool> seen;
    std::uint64_t filled = 0;
  };

  void complete_block(std::uint64_t block, std::span<const double> rows);
  void fold_ready();

  ProjectionSpec spec_;
  std::uint64_t n_blocks_ = 0;
  std::uint64_t next_fold_ = 0;
  std::vector<double> out_;
  std::map<std::uint64_t, PendingBlock> pending_;
  std::map<std::uint64_t, std::vector<double>> partials_;
  bool finished_ = false;
};

struct GradientChunk {
  std::uint64_t offset = 0;
  std::span<const double> values;
};

std::vector<double> project_chunked(const ProjectionSpec& spec, std::span<const GradientChunk> chunks);

/// Projects many vectors at once (rows of `g`, shape B x source_dim) with a
/// dense GEMM over on-the-fly sign tiles. Faster for large batches, but the
/// summation order differs from project(): results agree to rounding
/// (about 1e-12 relative), not bitwise.
Eigen::MatrixXd project_batch(const ProjectionSpec& spec, const Eigen::MatrixXd& g);

/// rows x cols table of signs, row-major; used for published test vectors.
std::vector<int> sign_table(std::uint64_t seed, std::uint64_t rows, std::uint64_t cols);

}  // namespace ntksel
