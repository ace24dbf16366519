#pragma once

namespace cmssl {

/// Entry point of the `cmssl` tool. Exit codes: 0 success, 1 usage or
/// configuration error, 2 runtime failure.
int run_cli(int argc, char** argv);

}  // namespace cmssl
