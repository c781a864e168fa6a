#include "effisegnet/errors.hpp"

namespace effisegnet {

int exit_code(ErrorClass cls) noexcept {
  switch (cls) {
    case ErrorClass::kConfig:
      return 2;
    case ErrorClass::kData:
      return 3;
    case ErrorClass::kResource:
      return 4;
    case ErrorClass::kNumerical:
      return 5;
    case ErrorClass::kContract:
      return 6;
    case ErrorClass::kLoad:
      return 7;
  }
  return 1;
}

}  // namespace effisegnet
