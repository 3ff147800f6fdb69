#pragma once

#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

#include "bayeslayers/tensor.hpp"

namespace bayeslayers {

// Which split a sample was generated for. Training refuses anything that is
// not id_train.
enum class Provenance { id_train, id_test, ood_test };

std::string_view to_string(Provenance p);

// Input is a vector or a [C x H x W] image. The box, when present, is
// [x_min, y_min, x_max, y_max] in pixels.
struct LabeledSample {
  Tensor input;
  std::size_t label = 0;
  std::optional<Tensor> box;
  Provenance provenance = Provenance::id_train;

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

using SampleSet = std::vector<LabeledSample>;

}  // namespace bayeslayers
