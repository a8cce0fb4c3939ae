// SPDX-License-Identifier: Apache-2.0
#include "cwac/tensor.hpp"

#include <sstream>

namespace cwac {

std::string_view to_string(ElemKind kind) {
  switch (kind) {
    case ElemKind::f32:
      return "f32";
    case ElemKind::u8:
      return "u8";
    case ElemKind::i32:
      return "i32";
  }
  return "?";
}

ElemKind elem_kind_from_string(std::string_view name) {
  if (name == "f32") return ElemKind::f32;
  if (name == "u8") return ElemKind::u8;
  if (name == "i32") return ElemKind::i32;
  throw ConfigError("unknown element kind '" + std::string(name) + "'");
}

std::size_t elem_size(ElemKind kind) {
  switch (kind) {
    case ElemKind::f32:
    case ElemKind::i32:
      return 4;
    case ElemKind::u8:
      return 1;
  }
  return 0;
}

std::size_t shape_numel(const Shape &shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace cwac
