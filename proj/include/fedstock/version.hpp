#pragma once

namespace fedstock {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace fedstock
