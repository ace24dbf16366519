// Acceptance suite. Usage: acceptance [fast|trend|all] [work-dir]

#include <cstring>
#include <exception>
#include <iostream>

#include "acceptance.hpp"

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "all";
  const std::filesystem::path work = argc > 2 ? argv[2] : "acceptance_runs";
  if (mode != "fast" && mode != "trend" && mode != "all") {
    std::cerr << "usage: acceptance [fast|trend|all] [work-dir]\n";
    return 2;
  }
  try {
    std::filesystem::create_directories(work);
    bool ok = true;
    if (mode != "trend") ok &= cmssl::acceptance::run_fast(work);
    if (mode != "fast") ok &= cmssl::acceptance::run_trend(work);
    return ok ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << "\n";
    return 2;
  }
}
