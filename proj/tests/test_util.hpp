#pragma once

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <filesystem>
#include <string>

namespace neco::testing {

/// Fresh, empty scratch directory for one test.
inline std::filesystem::path scratch_dir(const std::string& name) {
    namespace fs = std::filesystem;
    const char* env = std::getenv("NECO_TEST_TMP");
    fs::path base = env ? fs::path(env) : fs::temp_directory_path() / "neco_tests";
    fs::path dir = base / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace neco::testing
