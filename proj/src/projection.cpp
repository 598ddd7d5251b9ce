#include "ntksel/projection.hpp"

#include <array>
#include <cmath>
#include <string>

namespace ntksel {
namespace {

// sign_lut()[byte][q] is -1.0 when bit q of byte is set, else +1.0.
const std::array<std::array<double, 8>, 256>& sign_lut() {
  static const auto table = [] {
    std::array<std::array<double, 8>, 256> t{};
    for (int b = 0; b < 256; ++b) {
      for (int q = 0; q < 8; ++q) t[b][q] = ((b >> q) & 1) ? -1.0 : 1.0;
    }
    return t;
  }();
  return table;
}

std::uint64_t words_per_row(std::uint32_t target_dim) { return (target_dim + 63u) / 64u; }

void validate(const ProjectionSpec& spec) {
  if (spec.source_dim == 0 || spec.target_dim == 0) {
    throw Error(ErrorCode::config, "projection dimensions must be positive");
  }
}

// acc (padded to whole words) += g * Pi[row, :]
void accumulate_row(std::uint64_t seed, std::uint64_t row, double g, double* acc, std::uint64_t n_words) {
  const auto& lut = sign_lut();
  for (std::uint64_t w = 0; w < n_words; ++w) {
    const std::uint64_t word = sign_word(seed, row, w);
    double* dst = acc + 64 * w;
    for (int byte = 0; byte < 8; ++byte) {
      const double* s = lut[(word >> (8 * byte)) & 0xffu].data();
      double* d = dst + 8 * byte;
      for (int q = 0; q < 8; ++q) d[q] += g * s[q];
    }
  }
}

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t sign_word(std::uint64_t seed, std::uint64_t row, std::uint64_t block) noexcept {
  return splitmix64(splitmix64(splitmix64(seed) ^ row) ^ block);
}

int rademacher_sign(std::uint64_t seed, std::uint64_t row, std::uint64_t col) noexcept {
  return ((sign_word(seed, row, col / 64) >> (col % 64)) & 1u) ? -1 : 1;
}

std::vector<int> sign_table(std::uint64_t seed, std::uint64_t rows, std::uint64_t cols) {
  std::vector<int> out;
  out.reserve(rows * cols);
  for (std::uint64_t i = 0; i < rows; ++i) {
    for (std::uint64_t k = 0; k < cols; ++k) out.push_back(rademacher_sign(seed, i, k));
  }
  return out;
}

ChunkedProjector::ChunkedProjector(const ProjectionSpec& spec) : spec_(spec) {
  validate(spec_);
  n_blocks_ = (spec_.source_dim + kProjectionRowBlock - 1) / kProjectionRowBlock;
  out_.assign(spec_.target_dim, 0.0);
}

void ChunkedProjector::add(std::uint64_t offset, std::span<const double> slice) {
  if (finished_) throw Error(ErrorCode::config, "projector already finished");
  if (offset > spec_.source_dim || slice.size() > spec_.source_dim - offset) {
    throw Error(ErrorCode::dim_mismatch, "chunk [" + std::to_string(offset) + ", " +
                                             std::to_string(offset + slice.size()) + ") exceeds source_dim " +
                                             std::to_string(spec_.source_dim));
  }
  std::uint64_t pos = offset;
  const std::uint64_t end = offset + slice.size();
  while (pos < end) {
    const std::uint64_t block = pos / kProjectionRowBlock;
    const std::uint64_t block_begin = block * kProjectionRowBlock;
    const std::uint64_t block_end = std::min(block_begin + kProjectionRowBlock, spec_.source_dim);
    const std::uint64_t take_end = std::min(end, block_end);
    const std::span<const double> part = slice.subspan(pos - offset, take_end - pos);

    if (partials_.contains(block) || block < next_fold_) {
      throw Error(ErrorCode::overlap, "row " + std::to_string(pos) + " delivered twice");
    }
    if (pos == block_begin && take_end == block_end && !pending_.contains(block)) {
      complete_block(block, part);
    } else {
      auto& pb = pending_[block];
      if (pb.values.empty()) {
        pb.values.assign(block_end - block_begin, 0.0);
        pb.seen.assign(block_end - block_begin, false);
      }
      for (std::uint64_t r = pos; r < take_end; ++r) {
        const std::uint64_t local = r - block_begin;
        if (pb.seen[local]) throw Error(ErrorCode::overlap, "row " + std::to_string(r) + " delivered twice");
        pb.seen[local] = true;
        pb.values[local] = part[r - pos];
      }
      pb.filled += take_end - pos;
      if (pb.filled == block_end - block_begin) {
        std::vector<double> rows = std::move(pb.values);
        pending_.erase(block);
        complete_block(block, rows);
      }
    }
    pos = take_end;
  }
  fold_ready();
}

void ChunkedProjector::complete_block(std::uint64_t block, std::span<const double> rows) {
  const std::uint64_t n_words = words_per_row(spec_.target_dim);
  std::vector<double> acc(64 * n_words, 0.0);
  const std::uint64_t first_row = block * kProjectionRowBlock;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] == 0.0) continue;
    accumulate_row(spec_.seed, first_row + r, rows[r], acc.data(), n_words);
  }
  acc.resize(spec_.target_dim);
  partials_.emplace(block, std::move(acc));
}

void ChunkedProjector::fold_ready() {
  for (auto it = partials_.find(next_fold_); it != partials_.end(); it = partials_.find(next_fold_)) {
    const auto& partial = it->second;
    for (std::size_t k = 0; k < out_.size(); ++k) out_[k] += partial[k];
    partials_.erase(it);
    ++next_fold_;
  }
}

std::vector<double> ChunkedProjector::finish() {
  if (finished_) throw Error(ErrorCode::config, "projector already finished");
  fold_ready();
  if (next_fold_ != n_blocks_) {
    std::uint64_t first_missing = next_fold_ * kProjectionRowBlock;
    if (auto it = pending_.find(next_fold_); it != pending_.end()) {
      for (std::size_t r = 0; r < it->second.seen.size(); ++r) {
        if (!it->second.seen[r]) {
          first_missing += r;
          break;
        }
      }
    }
    throw Error(ErrorCode::coverage, "rows from " + std::to_string(first_missing) + " of " +
                                         std::to_string(spec_.source_dim) + " were never delivered");
  }
  finished_ = true;
  if (spec_.scale_mode == ScaleMode::jl_scaled) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(spec_.target_dim));
    for (double& v : out_) v *= inv;
  }
  return std::move(out_);
}

std::vector<double> project(const ProjectionSpec& spec, std::span<const double> g) {
  if (g.size() != spec.source_dim) {
    throw Error(ErrorCode::dim_mismatch, "gradient has " + std::to_string(g.size()) + " entries, projection expects " +
                                             std::to_string(spec.source_dim));
  }
  ChunkedProjector p(spec);
  p.add(0, g);
  return p.finish();
}

std::vector<double> project_chunked(const ProjectionSpec& spec, std::span<const GradientChunk> chunks) {
  ChunkedProjector p(spec);
  for (const auto& c : chunks) p.add(c.offset, c.values);
  return p.finish();
}

Eigen::MatrixXd project_batch(const ProjectionSpec& spec, const Eigen::MatrixXd& g) {
  validate(spec);
  if (static_cast<std::uint64_t>(g.cols()) != spec.source_dim) {
    throw Error(ErrorCode::dim_mismatch, "batch has " + std::to_string(g.cols()) + " columns, projection expects " +
                                             std::to_string(spec.source_dim));
  }
  constexpr std::uint64_t kTile = 256;
  const std::uint64_t n_words = words_per_row(spec.target_dim);
  const auto& lut = sign_lut();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(g.rows(), spec.target_dim);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tile(kTile, 64 * n_words);
  for (std::uint64_t row0 = 0; row0 < spec.source_dim; row0 += kTile) {
    const std::uint64_t rows = std::min(kTile, spec.source_dim - row0);
    for (std::uint64_t r = 0; r < rows; ++r) {
      double* dst = tile.row(static_cast<Eigen::Index>(r)).data();
      for (std::uint64_t w = 0; w < n_words; ++w) {
        const std::uint64_t word = sign_word(spec.seed, row0 + r, w);
        for (int byte = 0; byte < 8; ++byte) {
          const double* s = lut[(word >> (8 * byte)) & 0xffu].data();
          for (int q = 0; q < 8; ++q) dst[64 * w + 8 * byte + q] = s[q];
        }
      }
    }
    const auto r = static_cast<Eigen::Index>(rows);
    out.noalias() += g.middleCols(static_cast<Eigen::Index>(row0), r) *
                     tile.topLeftCorner(r, spec.target_dim);
  }
  if (spec.scale_mode == ScaleMode::jl_scaled) out *= 1.0 / std::sqrt(static_cast<double>(spec.target_dim));
  return out;
}

}  // namespace ntksel
