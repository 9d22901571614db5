#pragma once

namespace hsnc {

inline constexpr const char* kVersion = "0.1.0";

} // namespace hsnc
