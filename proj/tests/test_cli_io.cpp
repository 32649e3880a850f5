#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "mpq/checkpoint.hpp"
#include "mpq/trainer.hpp"

using namespace mpq;
using namespace mpq::testing;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mpq_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

RunConfig small_config(unsigned seed = 5) {
    RunConfig c;
    c.topology = reference_cnn();
    c.weight_bits = {2, 3, 4, 5, 6};
    c.seed = seed;
    c.epochs = 2;
    c.batch_size = 32;
    c.dataset.kind = "synthetic";
    c.dataset.samples = 128;
    c.dataset.seed = 1234;
    return c;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("checkpoint round trip") {
    TempDir tmp;
    Trainer t(small_config());
    for (int i = 0; i < 3; ++i) t.run_step();
    auto a = tmp.file("a.bin");
    t.save(a);

    SECTION("save, load, save is byte-identical") {
        Trainer u(small_config());
        u.load(a);
        auto b = tmp.file("b.bin");
        u.save(b);
        CHECK(slurp(a) == slurp(b));
    }
    SECTION("loaded state reproduces forward outputs exactly") {
        Trainer u(small_config());
        u.load(a);
        auto x = t.data.val.batch(0, 16);
        auto p = t.net.max_policy();
        t.net.training = u.net.training = false;
        CHECK(t.net.forward(p, x).logits->v == u.net.forward(p, x).logits->v);
    }
    SECTION("step counter and rng stream restore") {
        Trainer u(small_config());
        u.load(a);
        CHECK(u.step == t.step);
        CHECK(rng_to_string(u.rng) == rng_to_string(t.rng));
    }
    SECTION("flipping one payload byte fails the checksum") {
        auto bytes = slurp(a);
        bytes[bytes.size() - 1] ^= 0x01;
        auto bad = tmp.file("bad.bin");
        std::ofstream(bad, std::ios::binary)
            .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        Trainer u(small_config());
        CHECK_THROWS_WITH(u.load(bad), Catch::Matchers::ContainsSubstring("checksum"));
    }
    SECTION("topology mismatch is refused") {
        auto cfg = small_config();
        cfg.topology = mini_vgg();
        Trainer u(cfg);
        CHECK_THROWS_WITH(u.load(a), Catch::Matchers::ContainsSubstring("topology"));
    }
    SECTION("version mismatch is refused") {
        auto bytes = slurp(a);
        std::string text(bytes.begin(), bytes.end());
        auto pos = text.find("\"version\":1");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 11, "\"version\":9");
        auto bad = tmp.file("ver.bin");
        std::ofstream(bad, std::ios::binary)
            .write(text.data(), static_cast<std::streamsize>(text.size()));
        Trainer u(small_config());
        CHECK_THROWS_WITH(u.load(bad), Catch::Matchers::ContainsSubstring("version"));
    }
}

TEST_CASE("mid-run resume is bit-exact") {
    TempDir tmp;
    auto cfg = small_config(9);
    Trainer straight(cfg);
    Trainer resumed(cfg);
    for (int i = 0; i < 5; ++i) straight.run_step();
    for (int i = 0; i < 2; ++i) resumed.run_step();
    auto ck = tmp.file("mid.bin");
    resumed.save(ck);
    Trainer fresh(cfg);
    fresh.load(ck);
    for (int i = 0; i < 3; ++i) {
        resumed.run_step();
        fresh.run_step();
    }
    for (std::size_t l = 0; l < straight.net.num_layers(); ++l) {
        CHECK(fresh.net.layers[l].weight->v == straight.net.layers[l].weight->v);
        CHECK(fresh.net.layers[l].weight->v == resumed.net.layers[l].weight->v);
    }
    CHECK(rng_to_string(fresh.rng) == rng_to_string(straight.rng));
}

TEST_CASE("idx round trip") {
    TempDir tmp;
    auto img = tmp.file("img.idx");
    auto lab = tmp.file("lab.idx");
    std::vector<unsigned char> pixels(3 * 4 * 5);
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = static_cast<unsigned char>((i * 7) % 256);
    std::vector<unsigned char> labels{0, 3, 9};
    write_idx_images(img, pixels, 3, 4, 5);
    write_idx_labels(lab, labels);

    SECTION("contents survive the round trip") {
        auto ds = load_mnist_idx(img, lab);
        REQUIRE(ds.size() == 3);
        CHECK(ds.height == 4);
        CHECK(ds.width == 5);
        CHECK(ds.labels == std::vector<int>{0, 3, 9});
        for (std::size_t i = 0; i < pixels.size(); ++i)
            CHECK_THAT(ds.images[i],
                       Catch::Matchers::WithinAbs(pixels[i] / 255.f, 1e-7));
    }
    SECTION("wrong magic is reported with both values") {
        CHECK_THROWS_WITH(load_mnist_idx(lab, lab),
                          Catch::Matchers::ContainsSubstring("0x803"));
    }
    SECTION("truncated image payload is an error") {
        auto bytes = slurp(img);
        bytes.pop_back();
        auto cut = tmp.file("cut.idx");
        std::ofstream(cut, std::ios::binary)
            .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        CHECK_THROWS_WITH(load_mnist_idx(cut, lab),
                          Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("missing file is an error") {
        CHECK_THROWS_WITH(load_mnist_idx(tmp.file("nope.idx"), lab),
                          Catch::Matchers::ContainsSubstring("cannot open"));
    }
}

TEST_CASE("run config json round trip") {
    auto cfg = small_config();
    cfg.use_idm = false;
    cfg.idm.beta = 0.25f;
    cfg.optimizer.lr = 0.07f;
    cfg.search.lambda = 2.0f;
    auto j = run_config_to_json(cfg);
    auto back = run_config_from_json(j);
    CHECK(back.seed == cfg.seed);
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.weight_bits == cfg.weight_bits);
    CHECK(back.use_idm == cfg.use_idm);
    CHECK(back.idm.beta == cfg.idm.beta);
    CHECK(back.optimizer.lr == cfg.optimizer.lr);
    CHECK(back.search.lambda == cfg.search.lambda);
    CHECK(topology_hash(back.topology) == topology_hash(cfg.topology));
    // second round trip is a fixed point
    CHECK(run_config_to_json(back) == j);
}

TEST_CASE("topology json and hash") {
    auto t = reference_cnn();
    auto j = topology_to_json(t);
    auto back = topology_from_json(j);
    CHECK(topology_hash(back) == topology_hash(t));
    // any structural edit changes the hash
    auto t2 = t;
    t2.layers[1].out_ch += 1;
    CHECK(topology_hash(t2) != topology_hash(t));
    auto t3 = t;
    t3.layers[2].fixed8 = !t3.layers[2].fixed8;
    CHECK(topology_hash(t3) != topology_hash(t));
}

TEST_CASE("rng state string round trip") {
    std::mt19937 rng(42);
    rng.discard(1000);
    auto s = rng_to_string(rng);
    auto back = rng_from_string(s);
    for (int i = 0; i < 100; ++i) CHECK(rng() == back());
}
