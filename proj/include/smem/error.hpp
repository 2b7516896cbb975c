#pragma once

#include <stdexcept>
#include <string>

namespace smem {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SMEM_DEFINE_ERROR(Name)                              \
  class Name : public Error {                                \
   public:                                                   \
    explicit Name(const std::string& what) : Error(what) {}  \
  }

SMEM_DEFINE_ERROR(InvalidDistribution);
SMEM_DEFINE_ERROR(InvalidRawOutput);
SMEM_DEFINE_ERROR(AllZeroOutput);
SMEM_DEFINE_ERROR(LengthMismatch);
SMEM_DEFINE_ERROR(BudgetExceedsPool);
SMEM_DEFINE_ERROR(InvalidConfig);
SMEM_DEFINE_ERROR(ShapeMismatch);
SMEM_DEFINE_ERROR(EmptyLabeledSet);
SMEM_DEFINE_ERROR(EmptySplit);
SMEM_DEFINE_ERROR(IndexOutOfRange);
SMEM_DEFINE_ERROR(UnknownId);
SMEM_DEFINE_ERROR(AlreadyLabeled);
SMEM_DEFINE_ERROR(FormatError);
SMEM_DEFINE_ERROR(InvalidScore);

#undef SMEM_DEFINE_ERROR

}  // namespace smem
