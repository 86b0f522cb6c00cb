#pragma once

namespace lyocert {

inline constexpr const char* tool_version = "0.1.0";

}  // namespace lyocert
