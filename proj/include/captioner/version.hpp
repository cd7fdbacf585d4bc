#pragma once

namespace captioner {
inline constexpr const char* kEngineVersion = "0.1.0";
}
