#include "ntksel/preselect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <string>

#include "ntksel/parallel.hpp"

namespace ntksel {
namespace {

// Rows are (squared distance, candidate slot); slots index the id-sorted
// candidate list, so comparing slots is comparing SampleIds.
using Hit = std::pair<double, std::size_t>;

struct Prepared {
  std::vector<SampleId> ids;
  std::vector<const float*> vecs;
  std::size_t dim = 0;
};

Prepared prepare(std::span<const EmbeddingRecord> domain, std::span<const EmbeddingRecord> cand, std::uint64_t k) {
  if (cand.empty()) throw Error(ErrorCode::empty_candidates, "no candidate embeddings");
  if (k < 1 || k > cand.size()) {
    throw Error(ErrorCode::config, "K = " + std::to_string(k) + " must lie in [1, " + std::to_string(cand.size()) + "]");
  }
  Prepared p;
  p.dim = cand.front().vector.size();
  std::vector<const EmbeddingRecord*> order;
  order.reserve(cand.size());
  for (const auto& c : cand) {
    if (c.vector.size() != p.dim) throw Error(ErrorCode::dim_mismatch, c.id.str() + " has a different dimension");
    order.push_back(&c);
  }
  for (const auto& d : domain) {
    if (d.vector.size() != p.dim) throw Error(ErrorCode::dim_mismatch, d.id.str() + " has a different dimension");
  }
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i - 1]->id == order[i]->id) throw Error(ErrorCode::duplicate_id, order[i]->id.str());
  }
  for (const auto* r : order) {
    p.ids.push_back(r->id);
    p.vecs.push_back(r->vector.data());
  }
  return p;
}

double sq_dist(const float* a, const float* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

// Same summation order as sq_dist; returns +inf once the running sum
// exceeds `limit`. Partial sums only grow, so an abandoned candidate
// could never have beaten `limit`.
double sq_dist_bounded(const float* a, const float* b, std::size_t n, double limit) {
  double s = 0.0;
  std::size_t i = 0;
  while (i < n) {
    const std::size_t stop = std::min(n, i + 16);
    for (; i < stop; ++i) {
      const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      s += d * d;
    }
    if (s > limit) return std::numeric_limits<double>::infinity();
  }
  return s;
}

RelevanceTable finish(Prepared& p, const std::vector<std::vector<std::size_t>>& neighbours) {
  RelevanceTable t;
  t.cand_ids = std::move(p.ids);
  t.counts.assign(t.cand_ids.size(), 0);
  for (const auto& nb : neighbours) {
    for (std::size_t j : nb) ++t.counts[j];
  }
  return t;
}

// Max-heap of the K best hits so far; top() is the current K-th.
class Best {
 public:
  explicit Best(std::size_t k) : k_(k) {}
  void offer(Hit h) {
    if (heap_.size() < k_) {
      heap_.push(h);
    } else if (h < heap_.top()) {
      heap_.pop();
      heap_.push(h);
    }
  }
  bool full() const { return heap_.size() == k_; }
  double kth() const { return full() ? heap_.top().first : std::numeric_limits<double>::infinity(); }
  std::vector<std::size_t> slots() {
    std::vector<std::size_t> out;
    while (!heap_.empty()) {
      out.push_back(heap_.top().second);
      heap_.pop();
    }
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<Hit> heap_;
};

}  // namespace

RelevanceTable knn_relevance(std::span<const EmbeddingRecord> domain, std::span<const EmbeddingRecord> cand,
                             std::uint64_t k) {
  Prepared p = prepare(domain, cand, k);
  std::vector<std::vector<std::size_t>> neighbours(domain.size());
  parallel_for(domain.size(), [&](std::size_t begin, std::size_t end) {
    std::vector<Hit> hits(p.ids.size());
    for (std::size_t i = begin; i < end; ++i) {
      const float* q = domain[i].vector.data();
      for (std::size_t j = 0; j < p.ids.size(); ++j) hits[j] = {sq_dist(q, p.vecs[j], p.dim), j};
      std::nth_element(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k - 1), hits.end());
      auto& nb = neighbours[i];
      for (std::size_t j = 0; j < k; ++j) nb.push_back(hits[j].second);
    }
  });
  return finish(p, neighbours);
}

RelevanceTable accelerated_knn_relevance(std::span<const EmbeddingRecord> domain,
                                         std::span<const EmbeddingRecord> cand, std::uint64_t k) {
  Prepared p = prepare(domain, cand, k);
  const std::size_t n = p.ids.size();

  // Pivot: the candidate farthest from the first one, which tends to
  // spread the projected distances out.
  std::size_t pivot = 0;
  double far = -1.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = sq_dist(p.vecs[0], p.vecs[j], p.dim);
    if (d > far) {
      far = d;
      pivot = j;
    }
  }
  std::vector<std::pair<double, std::size_t>> ring(n);
  for (std::size_t j = 0; j < n; ++j) ring[j] = {std::sqrt(sq_dist(p.vecs[pivot], p.vecs[j], p.dim)), j};
  std::sort(ring.begin(), ring.end());

  std::vector<std::vector<std::size_t>> neighbours(domain.size());
  parallel_for(domain.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const float* q = domain[i].vector.data();
      const double dq = std::sqrt(sq_dist(q, p.vecs[pivot], p.dim));
      const auto start = std::lower_bound(ring.begin(), ring.end(), std::make_pair(dq, std::size_t{0})) - ring.begin();
      std::ptrdiff_t lo = start - 1, hi = start;
      Best best(k);
      // |d(c, pivot) - d(q, pivot)| <= d(q, c); the slack absorbs
      // rounding in the three square roots.
      auto prunable = [&](double pc) {
        const double kth = best.kth();
        if (!std::isfinite(kth)) return false;
        const double radius = std::sqrt(kth);
        const double slack = 1e-9 * (dq + pc + radius) + 1e-300;
        return std::abs(pc - dq) - slack > radius;
      };
      auto visit = [&](std::size_t slot) {
        const double limit = best.full() ? best.kth() : std::numeric_limits<double>::infinity();
        const double d = sq_dist_bounded(q, p.vecs[slot], p.dim, limit);
        if (std::isfinite(d)) best.offer({d, slot});
      };
      bool up = hi < static_cast<std::ptrdiff_t>(n), down = lo >= 0;
      while (up || down) {
        // Visit whichever side is closer in pivot distance first.
        const bool take_up = up && (!down || ring[hi].first - dq <= dq - ring[lo].first);
        if (take_up) {
          if (prunable(ring[hi].first)) {
            up = false;
            continue;
          }
          visit(ring[hi].second);
          up = ++hi < static_cast<std::ptrdiff_t>(n);
        } else {
          if (prunable(ring[lo].first)) {
            down = false;
            continue;
          }
          visit(ring[lo].second);
          down = --lo >= 0;
        }
      }
      neighbours[i] = best.slots();
    }
  });
  return finish(p, neighbours);
}

std::vector<SampleId> top_m(const RelevanceTable& table, std::uint64_t m) {
  if (m > table.cand_ids.size()) {
    throw Error(ErrorCode::m_too_large, "M = " + std::to_string(m) + " exceeds " +
                                            std::to_string(table.cand_ids.size()) + " candidates");
  }
  std::vector<std::size_t> order(table.cand_ids.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  auto before = [&](std::size_t a, std::size_t b) {
    if (table.counts[a] != table.counts[b]) return table.counts[a] > table.counts[b];
    return table.cand_ids[a] < table.cand_ids[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(), before);
  std::vector<SampleId> out;
  out.reserve(m);
  for (std::size_t j = 0; j < m; ++j) out.push_back(table.cand_ids[order[j]]);
  return out;
}

nlohmann::ordered_json to_json(const RelevanceTable& table) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < table.cand_ids.size(); ++i) j[table.cand_ids[i].str()] = table.counts[i];
  return j;
}

}  // namespace ntksel
