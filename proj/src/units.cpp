#include "units.hpp"

#include <algorithm>

#include "error.hpp"

namespace stark {

const char* to_string(UnitKind kind) {
  switch (kind) {
    case UnitKind::head: return "head";
    case UnitKind::neuron: return "neuron";
    case UnitKind::parameter: return "parameter";
  }
  return "?";
}

UnitKind parse_unit_kind(const std::string& s) {
  if (s == "head") return UnitKind::head;
  if (s == "neuron") return UnitKind::neuron;
  if (s == "parameter") return UnitKind::parameter;
  fail(ErrorCode::input, "unknown unit kind '" + s + "'");
}

std::string to_string(const UnitId& u) {
  std::string s = "L" + std::to_string(u.layer) + "." + to_string(u.kind);
  if (!u.tensor.empty()) s += "." + u.tensor;
  return s + "[" + std::to_string(u.index) + "]";
}

const char* to_string(MaskProvenance::Source s) {
  switch (s) {
    case MaskProvenance::Source::ranked: return "ranked";
    case MaskProvenance::Source::random: return "random";
    case MaskProvenance::Source::automatic: return "auto";
    case MaskProvenance::Source::none: return "none";
  }
  return "?";
}

bool SparsityMask::contains(const UnitId& u) const {
  return std::binary_search(removed.begin(), removed.end(), u);
}

std::size_t SparsityMask::count(UnitKind k) const {
  return static_cast<std::size_t>(
      std::count_if(removed.begin(), removed.end(), [k](const UnitId& u) { return u.kind == k; }));
}

}  // namespace stark
