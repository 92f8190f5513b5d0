#pragma once

#include <stdexcept>
#include <string>

namespace efem {

enum class ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    EmptyCloud,
    DegenerateFeature,
    DegenerateScale,
    TapeMismatch,
    SamplingFailed,
    PlacementFailed,
    MissingNormals,
    Io,
    Config,
    Numeric,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace efem
