#include "bayeslayers/sample.hpp"

namespace bayeslayers {

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::id_train: return "id_train";
    case Provenance::id_test: return "id_test";
    case Provenance::ood_test: return "ood_test";
  }
  return "unknown";
}

}  // namespace bayeslayers
