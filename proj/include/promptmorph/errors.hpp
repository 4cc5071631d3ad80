#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace promptmorph {

// Base for every error the library raises. `kind()` is the stable machine
// name used by the CLI to map failures onto exit codes.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define PROMPTMORPH_DEFINE_ERROR(NAME)                    \
    class NAME : public Error {                           \
    public:                                               \
        explicit NAME(const std::string& what)            \
            : Error(#NAME, what) {}                       \
    }

// Input / validation failures (CLI exit code 2).
PROMPTMORPH_DEFINE_ERROR(ParseError);
PROMPTMORPH_DEFINE_ERROR(ValidationError);
PROMPTMORPH_DEFINE_ERROR(UnknownCategory);
PROMPTMORPH_DEFINE_ERROR(EmptyCorpus);
PROMPTMORPH_DEFINE_ERROR(InvalidChunking);
PROMPTMORPH_DEFINE_ERROR(EmptyIndex);
PROMPTMORPH_DEFINE_ERROR(EmptyStream);
PROMPTMORPH_DEFINE_ERROR(ZeroVector);
PROMPTMORPH_DEFINE_ERROR(DimensionMismatch);
PROMPTMORPH_DEFINE_ERROR(ParseFailure);
PROMPTMORPH_DEFINE_ERROR(UnreadableImage);
PROMPTMORPH_DEFINE_ERROR(MissingScore);
PROMPTMORPH_DEFINE_ERROR(MismatchedPair);
PROMPTMORPH_DEFINE_ERROR(NoScoreablePairs);
PROMPTMORPH_DEFINE_ERROR(MissingVerdicts);
PROMPTMORPH_DEFINE_ERROR(NoPerplexities);
PROMPTMORPH_DEFINE_ERROR(MissingLabels);

// Infrastructure failures (CLI exit code 1).
PROMPTMORPH_DEFINE_ERROR(BackendError);
PROMPTMORPH_DEFINE_ERROR(MalformedResponse);
PROMPTMORPH_DEFINE_ERROR(NoPerplexitySource);
PROMPTMORPH_DEFINE_ERROR(NoImageEmbedBackend);
PROMPTMORPH_DEFINE_ERROR(AllRefused);
PROMPTMORPH_DEFINE_ERROR(IoError);

#undef PROMPTMORPH_DEFINE_ERROR

}  // namespace promptmorph
