#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "ntksel/feature_store.hpp"

namespace ntksel {

/// counts[j] is the number of domain points that have cand_ids[j] among
/// their K nearest candidates. cand_ids are in ascending SampleId order.
struct RelevanceTable {
  std::vector<SampleId> cand_ids;
  std::vector<std::uint64_t> counts;
};

/// Exhaustive search: every distance is computed and the K smallest
/// (squared distance, id) pairs are kept per domain point.
RelevanceTable knn_relevance(std::span<const EmbeddingRecord> domain, std::span<const EmbeddingRecord> cand,
                             std::uint64_t k);

/// Same result as knn_relevance, bit for bit. Candidates are ordered by
/// distance to a pivot and scanned outward from each query's position;
/// the triangle inequality stops the scan, and partial distance sums
/// are abandoned once they exceed the current K-th best.
RelevanceTable accelerated_knn_relevance(std::span<const EmbeddingRecord> domain,
                                         std::span<const EmbeddingRecord> cand, std::uint64_t k);

/// The M ids with the largest counts, sorted by (count desc, id asc).
std::vector<SampleId> top_m(const RelevanceTable& table, std::uint64_t m);

/// {"tag:index": count, ...} in cand_ids order.
nlohmann::ordered_json to_json(const RelevanceTable& table);

}  // namespace ntksel
