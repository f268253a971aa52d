#pragma once

#include "zerommt/numerics.hpp"

#include <optional>
#include <vector>

namespace zerommt {

/// One (source, target, image) triple. Targets begin with BOS and end with EOS.
struct Example {
  int id = 0;
  std::vector<int> src;
  std::vector<int> tgt;
  std::optional<Vector> image;

  bool operator==(const Example&) const = default;
};

/// Source with two (image, translation) pairs; tgt_a is correct under img_a
/// and tgt_b under img_b.
struct ContrastiveInstance {
  int id = 0;
  std::vector<int> src;
  Vector img_a;
  std::vector<int> tgt_a;
  Vector img_b;
  std::vector<int> tgt_b;

  bool operator==(const ContrastiveInstance&) const = default;
};

}  // namespace zerommt
