#pragma once

#include <spdlog/logger.h>

#include <memory>

namespace idiolex {

/// Process-wide logger. Writes to stderr so stdout stays reserved for reports.
std::shared_ptr<spdlog::logger> logger();

}  // namespace idiolex
