#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace crosr {

enum class ErrorCategory {
    kConfig,
    kInput,
    kFormat,
    kFit,
    kNumerical,
    kIo,
};

inline std::string_view category_name(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::kConfig: return "config";
        case ErrorCategory::kInput: return "input";
        case ErrorCategory::kFormat: return "format";
        case ErrorCategory::kFit: return "fit";
        case ErrorCategory::kNumerical: return "numerical";
        case ErrorCategory::kIo: return "io";
    }
    return "unknown";
}

// Process exit code used by the command-line tool for each category.
inline int exit_code(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::kIo: return 2;
        case ErrorCategory::kConfig: return 3;
        case ErrorCategory::kFormat: return 4;
        case ErrorCategory::kFit: return 5;
        case ErrorCategory::kNumerical: return 6;
        case ErrorCategory::kInput: return 7;
    }
    return 1;
}

class Error : public std::runtime_error {
   public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

   private:
    ErrorCategory category_;
};

#define CROSR_DEFINE_ERROR(Name, Category)                                     \
    class Name : public Error {                                                \
       public:                                                                 \
        explicit Name(const std::string& what) : Error(Category, what) {}      \
    };

CROSR_DEFINE_ERROR(ConfigError, ErrorCategory::kConfig)
CROSR_DEFINE_ERROR(InputError, ErrorCategory::kInput)
CROSR_DEFINE_ERROR(FormatError, ErrorCategory::kFormat)
CROSR_DEFINE_ERROR(FitError, ErrorCategory::kFit)
CROSR_DEFINE_ERROR(NumericalError, ErrorCategory::kNumerical)
CROSR_DEFINE_ERROR(IoError, ErrorCategory::kIo)

#undef CROSR_DEFINE_ERROR

}  // namespace crosr
