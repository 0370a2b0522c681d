#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "lanekeep/container.hpp"
#include "lanekeep/rng.hpp"

using namespace lanekeep;

static std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

TEST_CASE("container round-trips named arrays and metadata") {
    Rng rng(5);
    ArrayContainer c;
    c.meta["config_hash"] = "deadbeef01234567";
    c.put("weights", Tensor::randn({4, 3}, rng));
    c.put("bias", Tensor::randn({3}, rng));
    c.put("empty_rank3", Tensor::zeros({2, 1, 2}));

    std::string path = temp_path("lanekeep_roundtrip.ndar");
    c.save(path);
    ArrayContainer loaded = ArrayContainer::load(path);

    CHECK(loaded.meta.at("config_hash") == "deadbeef01234567");
    CHECK(loaded.arrays.size() == 3);
    for (const auto& [name, t] : c.arrays) {
        const Tensor& l = loaded.get(name);
        CHECK(l.shape == t.shape);
        CHECK(l.data == t.data);  // bit-exact
    }
    std::filesystem::remove(path);
}

TEST_CASE("container save is atomic: no temp file left behind") {
    ArrayContainer c;
    c.put("x", Tensor::scalar(1.0));
    std::string path = temp_path("lanekeep_atomic.ndar");
    c.save(path);
    CHECK(std::filesystem::exists(path));
    CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
    std::filesystem::remove(path);
}

TEST_CASE("loading a missing or corrupt file is a dependency error") {
    CHECK_THROWS_AS(ArrayContainer::load(temp_path("lanekeep_nonexistent.ndar")), DependencyError);

    std::string path = temp_path("lanekeep_corrupt.ndar");
    {
        std::ofstream out(path, std::ios::binary);
        out.write("JUNK", 4);
    }
    CHECK_THROWS_AS(ArrayContainer::load(path), DependencyError);
    std::filesystem::remove(path);
}

TEST_CASE("missing array access names the array") {
    ArrayContainer c;
    try {
        c.get("absent");
        FAIL("expected DependencyError");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("absent") != std::string::npos);
    }
}

TEST_CASE("file hash is stable and content sensitive") {
    std::string p1 = temp_path("lanekeep_hash_a.bin");
    std::string p2 = temp_path("lanekeep_hash_b.bin");
    {
        std::ofstream a(p1, std::ios::binary), b(p2, std::ios::binary);
        a << "same bytes";
        b << "same bytez";
    }
    CHECK(file_hash_hex(p1) == file_hash_hex(p1));
    CHECK(file_hash_hex(p1) != file_hash_hex(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}
