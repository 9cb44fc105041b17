#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>

#include "mixcache/model.hpp"
#include "mixcache/tensor.hpp"

using namespace mixcache;

namespace {

const ModelConfig kToyConfig{12, 64, 64, 32, 0};
const ModelConfig kSmallConfig{6, 24, 16, 8, 5};

// Pinned at first build of the toy-default model; guards against silent
// drift of the seeded parameter stream or the forward pass.
constexpr std::uint64_t kToyParamChecksum = 17970818622192958415ULL;
constexpr double kToyForwardSum = 38.554888378447998;

}  // namespace

TEST(ModelConfig, Validation) {
    EXPECT_THROW(build_model(ModelConfig{1, 8, 8, 4, 0}), std::invalid_argument);
    EXPECT_THROW(build_model(ModelConfig{4, 0, 8, 4, 0}), std::invalid_argument);
    EXPECT_THROW(build_model(ModelConfig{4, 8, 0, 4, 0}), std::invalid_argument);
    EXPECT_THROW(build_model(ModelConfig{4, 8, 8, 0, 0}), std::invalid_argument);
    EXPECT_NO_THROW(build_model(ModelConfig{2, 1, 1, 1, 0}));
}

TEST(BuildModel, DeterministicParameters) {
    const ToyDiT a = build_model(kSmallConfig);
    const ToyDiT b = build_model(kSmallConfig);
    EXPECT_EQ(a.parameter_checksum(), b.parameter_checksum());

    ModelConfig other = kSmallConfig;
    other.init_seed = 6;
    EXPECT_NE(a.parameter_checksum(), build_model(other).parameter_checksum());
}

TEST(BuildModel, GoldenChecksum) {
    const ToyDiT model = build_model(kToyConfig);
    EXPECT_EQ(model.parameter_checksum(), kToyParamChecksum);

    const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 42);
    const Conditioning cond = prompt_conditioning(32, 7);
    const Tensor eps = model.forward(x, 25, cond).output;
    double sum = 0.0;
    for (double v : eps.data) {
        sum += v;
    }
    EXPECT_NEAR(sum, kToyForwardSum, 1e-9);
}

TEST(Forward, DeterministicOutputs) {
    const ToyDiT model = build_model(kSmallConfig);
    const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 1);
    const Conditioning cond = prompt_conditioning(kSmallConfig.cond_dim, 2);
    EXPECT_TRUE(bitwise_equal(model.forward(x, 3, cond).output, model.forward(x, 3, cond).output));
}

TEST(Forward, CompositionSplitting) {
    const ToyDiT model = build_model(kSmallConfig);
    const int L = model.num_blocks();
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 100 + trial);
        const int t = 1 + trial % 9;
        const Conditioning cond =
            trial % 3 == 0 ? null_conditioning(kSmallConfig.cond_dim)
                           : prompt_conditioning(kSmallConfig.cond_dim, 200 + trial);
        std::vector<int> all_blocks;
        for (int i = 0; i < L; ++i) {
            all_blocks.push_back(i);
        }
        const ForwardResult full = model.forward(x, t, cond, 0, all_blocks);
        for (int i = 0; i < L; ++i) {
            const ForwardResult resumed = model.forward(full.captured.at(i), t, cond, i + 1);
            EXPECT_TRUE(bitwise_equal(resumed.output, full.output)) << "split at block " << i;
        }
    }
}

TEST(Forward, StartAtEndIsOutputProjectionOnly) {
    const ToyDiT model = build_model(kSmallConfig);
    const int L = model.num_blocks();
    const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 77);
    const Conditioning cond = prompt_conditioning(kSmallConfig.cond_dim, 78);
    const ForwardResult full = model.forward(x, 2, cond, 0, {L - 1});
    const ForwardResult tail = model.forward(full.captured.at(L - 1), 2, cond, L);
    EXPECT_TRUE(bitwise_equal(tail.output, full.output));
}

TEST(Forward, CapturedSetMatchesRequest) {
    const ToyDiT model = build_model(kSmallConfig);
    const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 50);
    const Conditioning cond = null_conditioning(kSmallConfig.cond_dim);
    const ForwardResult res = model.forward(x, 1, cond, 0, {1, 4});
    EXPECT_EQ(res.captured.size(), 2u);
    EXPECT_TRUE(res.captured.count(1));
    EXPECT_TRUE(res.captured.count(4));
    EXPECT_EQ(res.captured.at(1).shape, model.activation_shape());
}

TEST(Forward, ConditioningSensitivity) {
    const ToyDiT model = build_model(kToyConfig);
    const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 4);
    const Tensor with_prompt = model.forward(x, 10, prompt_conditioning(32, 5)).output;
    const Tensor with_null = model.forward(x, 10, null_conditioning(32)).output;
    EXPECT_GT(relative_l1(with_prompt, with_null), 0.0);
}

TEST(Forward, TimestepSensitivity) {
    const ToyDiT model = build_model(kSmallConfig);
    const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 4);
    const Conditioning cond = prompt_conditioning(kSmallConfig.cond_dim, 5);
    const Tensor at_five = model.forward(x, 5, cond).output;
    const Tensor at_six = model.forward(x, 6, cond).output;
    EXPECT_GT(relative_l1(at_five, at_six), 0.0);
}

TEST(Forward, ErrorPaths) {
    const ToyDiT model = build_model(kSmallConfig);
    const int L = model.num_blocks();
    const Tensor latent = gaussian_like(model.latent_shape(), 0.0, 1.0, 1);
    const Tensor act = gaussian_like(model.activation_shape(), 0.0, 1.0, 2);
    const Conditioning cond = null_conditioning(kSmallConfig.cond_dim);

    EXPECT_THROW(model.forward(latent, 1, cond, -1), std::out_of_range);
    EXPECT_THROW(model.forward(latent, 1, cond, L + 1), std::out_of_range);
    EXPECT_THROW(model.forward(act, 1, cond, 2, {1}), std::out_of_range);   // capture below start
    EXPECT_THROW(model.forward(latent, 1, cond, 0, {L}), std::out_of_range);  // capture past end
    EXPECT_THROW(model.forward(act, 1, cond, 0), std::invalid_argument);    // latent expected
    EXPECT_THROW(model.forward(latent, 1, cond, 1), std::invalid_argument);  // activation expected
    EXPECT_THROW(model.forward(latent, 1, null_conditioning(3), 0), std::invalid_argument);
}

TEST(ModelIo, SaveLoadRoundTrip) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mixcache_model_io_test";
    fs::remove_all(dir);

    const ToyDiT model = build_model(kSmallConfig);
    model.save(dir.string());
    EXPECT_TRUE(fs::exists(dir / "manifest.txt"));
    EXPECT_TRUE(fs::exists(dir / "block0.token_mix.mxt"));

    const ToyDiT loaded = ToyDiT::load(dir.string());
    EXPECT_EQ(loaded.parameter_checksum(), model.parameter_checksum());

    const Tensor x = gaussian_like(model.latent_shape(), 0.0, 1.0, 9);
    const Conditioning cond = prompt_conditioning(kSmallConfig.cond_dim, 10);
    EXPECT_TRUE(bitwise_equal(loaded.forward(x, 4, cond).output, model.forward(x, 4, cond).output));
    fs::remove_all(dir);
}

TEST(ModelIo, LoadErrors) {
    EXPECT_THROW(ToyDiT::load("/nonexistent/model/dir"), std::runtime_error);
}
