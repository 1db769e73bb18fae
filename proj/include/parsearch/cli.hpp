#pragma once

// Command-line front end. run_cli is the whole program minus process
// plumbing, so tests drive it in-process.

#include <iosfwd>
#include <string_view>
#include <string>
#include <vector>

namespace parsearch {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // a check ran and failed (gradcheck)
inline constexpr int kExitConfig = 2;   // bad flags, config, data or arch string
inline constexpr int kExitRuntime = 3;  // aborted during compute

// `args` excludes the program name. Data goes to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Token alphabet used by `synth` to render induction corpora as text.
inline constexpr std::string_view kSynthAlphabet =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

}  // namespace parsearch
