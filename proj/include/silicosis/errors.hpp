#ifndef SILICOSIS_ERRORS_HPP
#define SILICOSIS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace silicosis {

/// Base of every error raised by the library. `name()` is the stable
/// identifier reported by the CLI summary.
class Error : public std::runtime_error {
 public:
  Error(std::string name, const std::string& what)
      : std::runtime_error(what), name_(std::move(name)) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

#define SILICOSIS_DEFINE_ERROR(Type)                                  \
  class Type : public Error {                                         \
   public:                                                            \
    explicit Type(const std::string& what) : Error(#Type, what) {}    \
  }

SILICOSIS_DEFINE_ERROR(InvalidArgument);
SILICOSIS_DEFINE_ERROR(DimensionMismatch);
SILICOSIS_DEFINE_ERROR(InvalidWeights);
SILICOSIS_DEFINE_ERROR(StepSizeUnderflow);
SILICOSIS_DEFINE_ERROR(NegativityViolation);
SILICOSIS_DEFINE_ERROR(OutOfRange);
SILICOSIS_DEFINE_ERROR(MissingAccumulator);
SILICOSIS_DEFINE_ERROR(NoBracket);
SILICOSIS_DEFINE_ERROR(DegenerateDenominator);
SILICOSIS_DEFINE_ERROR(SingularMatrix);

#undef SILICOSIS_DEFINE_ERROR

}  // namespace silicosis

#endif  // SILICOSIS_ERRORS_HPP
