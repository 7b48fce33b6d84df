#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hpmkd {

// Base of every error raised by the library. Catch this to handle any of them.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define HPMKD_DECLARE_ERROR(Name)      \
  class Name : public Error {          \
   public:                             \
    using Error::Error;                \
  }

HPMKD_DECLARE_ERROR(InvalidSpecError);
HPMKD_DECLARE_ERROR(ShapeError);
HPMKD_DECLARE_ERROR(InvalidTemperatureError);
HPMKD_DECLARE_ERROR(InvalidDistributionError);
HPMKD_DECLARE_ERROR(InvalidParameterError);
HPMKD_DECLARE_ERROR(InvalidLossError);
HPMKD_DECLARE_ERROR(InsufficientHistoryError);
HPMKD_DECLARE_ERROR(InvalidGridError);
HPMKD_DECLARE_ERROR(StorageError);
HPMKD_DECLARE_ERROR(IntegrityError);
HPMKD_DECLARE_ERROR(InfeasibleSizeError);
HPMKD_DECLARE_ERROR(SchemaError);
HPMKD_DECLARE_ERROR(MissingValueError);
HPMKD_DECLARE_ERROR(StratificationError);
HPMKD_DECLARE_ERROR(InvalidRateError);
HPMKD_DECLARE_ERROR(InfeasibleRatioError);
HPMKD_DECLARE_ERROR(InvalidInputError);
HPMKD_DECLARE_ERROR(UndefinedRetentionError);
HPMKD_DECLARE_ERROR(UndefinedSilhouetteError);
HPMKD_DECLARE_ERROR(UsageError);
HPMKD_DECLARE_ERROR(ValidationError);

#undef HPMKD_DECLARE_ERROR

// Raised when a gradient or parameter turns non-finite; carries the layer.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::size_t layer)
      : Error(what + " (layer " + std::to_string(layer) + ")"), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

// Raised by the parallel pipeline when a task throws.
class PipelineError : public Error {
 public:
  PipelineError(const std::string& what, int task_id)
      : Error("task " + std::to_string(task_id) + ": " + what), task_id_(task_id) {}
  int task_id() const noexcept { return task_id_; }

 private:
  int task_id_;
};

}  // namespace hpmkd
