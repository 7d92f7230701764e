#pragma once

#include <stdexcept>
#include <string>

namespace mrc {

// Base class for every error raised by the library. `kind()` is the stable
// name used in logs and CLI diagnostics.
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

#define MRC_DEFINE_ERROR(Name)                                                 \
  class Name : public Error {                                                  \
  public:                                                                      \
    explicit Name(const std::string& what) : Error(#Name, what) {}             \
  }

MRC_DEFINE_ERROR(MissingFile);
MRC_DEFINE_ERROR(MalformedRecord);
MRC_DEFINE_ERROR(EmptyDataset);
MRC_DEFINE_ERROR(ShapeNotDivisible);
MRC_DEFINE_ERROR(DegenerateSample);
MRC_DEFINE_ERROR(BadGeometry);
MRC_DEFINE_ERROR(GeometryMismatch);
MRC_DEFINE_ERROR(BadConfig);
MRC_DEFINE_ERROR(ShapeMismatch);
MRC_DEFINE_ERROR(TooSmallForPyramid);
MRC_DEFINE_ERROR(BadTargetRange);
MRC_DEFINE_ERROR(NonFiniteLoss);
MRC_DEFINE_ERROR(EmptyResults);
MRC_DEFINE_ERROR(IoError);
MRC_DEFINE_ERROR(IndivisibleBatch);

#undef MRC_DEFINE_ERROR

} // namespace mrc
