#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace stark {

enum class UnitKind { head, neuron, parameter };

const char* to_string(UnitKind kind);
UnitKind parse_unit_kind(const std::string& s);

// A prunable unit. For parameters, `tensor` names the weight within the layer
// ("head.2.wq", "w1", ...) and `index` is the flat offset inside it; for heads and
// neurons `tensor` is empty. Ordering is (layer, kind, tensor, index), which
// is the tie-break order used when ranking.
struct UnitId {
  std::size_t layer = 0;
  UnitKind kind = UnitKind::head;
  std::string tensor;
  std::size_t index = 0;

  auto operator<=>(const UnitId&) const = default;
  bool operator==(const UnitId&) const = default;
};

std::string to_string(const UnitId& u);

enum class MaskKind { structured, unstructured };

struct MaskProvenance {
  enum class Source { ranked, random, automatic, none } source = Source::none;
  double lambda = 0.0;
  std::uint64_t seed = 0;
};

const char* to_string(MaskProvenance::Source s);

struct SparsityMask {
  MaskKind kind = MaskKind::structured;
  std::vector<UnitId> removed;  // sorted, unique
  double sparsity = 0.0;
  MaskProvenance provenance;

  bool empty() const noexcept { return removed.empty(); }
  bool contains(const UnitId& u) const;
  std::size_t count(UnitKind kind) const;
};

}  // namespace stark
