#pragma once

#include <stdexcept>
#include <string>

namespace kvedit {

// Base class for every error raised by the library. Callers that only care
// about "something failed" catch this; tests match on the concrete type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define KVEDIT_DEFINE_ERROR(Name)                                   \
    class Name : public Error {                                     \
    public:                                                         \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

KVEDIT_DEFINE_ERROR(DimensionMismatch);
KVEDIT_DEFINE_ERROR(SingularCovariance);
KVEDIT_DEFINE_ERROR(RankDeficient);
KVEDIT_DEFINE_ERROR(EmptyInput);
KVEDIT_DEFINE_ERROR(NonFinite);
KVEDIT_DEFINE_ERROR(DegenerateKey);
KVEDIT_DEFINE_ERROR(OutOfRange);
KVEDIT_DEFINE_ERROR(ZeroVector);
KVEDIT_DEFINE_ERROR(InfeasibleConfig);
KVEDIT_DEFINE_ERROR(FitFailure);
KVEDIT_DEFINE_ERROR(MalformedDump);
KVEDIT_DEFINE_ERROR(LabelMismatch);
KVEDIT_DEFINE_ERROR(ConfigMismatch);
KVEDIT_DEFINE_ERROR(IoError);

#undef KVEDIT_DEFINE_ERROR

}  // namespace kvedit
