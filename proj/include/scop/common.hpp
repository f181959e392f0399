#pragma once

#include <cstdint>
#include <stdexcept>
#include <sstream>
#include <string>

namespace scop {

// Error type for everything recoverable: bad shapes, malformed files,
// violated invariants. Parsers and ops throw this instead of aborting.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    throw Error(os.str());
}

template <class... Args>
void require(bool cond, const Args&... args) {
    if (!cond) fail(args...);
}

}  // namespace scop
