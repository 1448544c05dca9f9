#pragma once

#include <stdexcept>
#include <string>

namespace w2w {

// Exit-code families used by the CLI.
enum class ErrorKind { kConfig = 2, kArtifact = 3, kNumerical = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define W2W_DEFINE_ERROR(Name, Kind)                                                 \
    class Name : public Error {                                                      \
    public:                                                                          \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, #Name ": " + what) {} \
    }

W2W_DEFINE_ERROR(DimensionError, kConfig);
W2W_DEFINE_ERROR(LengthMismatch, kConfig);
W2W_DEFINE_ERROR(ShapeMismatch, kConfig);
W2W_DEFINE_ERROR(InvalidSigma, kConfig);
W2W_DEFINE_ERROR(ContextOutOfRange, kConfig);
W2W_DEFINE_ERROR(DuplicateId, kConfig);
W2W_DEFINE_ERROR(EmptyDataset, kConfig);
W2W_DEFINE_ERROR(SingleClassError, kConfig);
W2W_DEFINE_ERROR(ConfigError, kConfig);
W2W_DEFINE_ERROR(SpaceMismatch, kConfig);
W2W_DEFINE_ERROR(DegenerateData, kNumerical);
W2W_DEFINE_ERROR(SingularSystem, kNumerical);
W2W_DEFINE_ERROR(DecodeFailure, kNumerical);
W2W_DEFINE_ERROR(DivergenceError, kNumerical);
W2W_DEFINE_ERROR(MissingArtifact, kArtifact);
W2W_DEFINE_ERROR(HashMismatch, kArtifact);
W2W_DEFINE_ERROR(FormatError, kArtifact);

#undef W2W_DEFINE_ERROR

}  // namespace w2w
