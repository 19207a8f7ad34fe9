#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "styleseg/losses.hpp"
#include "styleseg/models.hpp"
#include "test_util.hpp"

using namespace styleseg;

namespace {

ImageSample random_image(std::mt19937_64& rng, int size) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    ImageSample img{"img", size, size, std::vector<float>(static_cast<std::size_t>(size) * size * 3)};
    for (auto& v : img.pixels) v = u(rng);
    return img;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

SegModelConfig tiny_seg(int styles) {
    SegModelConfig c;
    c.styles = styles;
    c.base_width = 2;
    c.max_width = 4;
    c.n_stages = 3;
    c.convs_per_stage = 2;
    c.resolution = 8;
    return c;
}

ClsModelConfig tiny_cls(int styles) {
    ClsModelConfig c;
    c.styles = styles;
    c.base_width = 2;
    c.max_width = 4;
    c.n_stages = 3;
    c.resolution = 8;
    return c;
}

}  // namespace

TEST(SegmentationModel, OutputShapeAndRange) {
    std::mt19937_64 rng(1);
    SegmentationModel<float> model(tiny_seg(3), 7);
    const auto out = model.forward(random_image(rng, 8));
    EXPECT_EQ(out.styles, 3);
    EXPECT_EQ(out.height, 8);
    for (float v : out.values) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(SegmentationModel, SingleStyleIsNaiveBaselineShape) {
    std::mt19937_64 rng(2);
    SegmentationModel<float> model(tiny_seg(1), 7);
    EXPECT_EQ(model.forward(random_image(rng, 8)).styles, 1);
}

TEST(SegmentationModel, ParameterCountsAreFixedByConfig) {
    EXPECT_EQ(SegmentationModel<float>(SegModelConfig{}).parameter_count(), 73850u);
    EXPECT_EQ(SegmentationModel<float>(tiny_seg(2)).parameter_count(), 636u);
    EXPECT_EQ(StyleClassifier<float>(ClsModelConfig{}).parameter_count(), 24730u);
    EXPECT_EQ(StyleClassifier<float>(tiny_cls(2)).parameter_count(), 308u);
}

TEST(SegmentationModel, DeterministicInitialisation) {
    SegmentationModel<float> a(tiny_seg(2), 11), b(tiny_seg(2), 11), c(tiny_seg(2), 12);
    EXPECT_EQ(a.parameters()[0]->value, b.parameters()[0]->value);
    EXPECT_NE(a.parameters()[0]->value, c.parameters()[0]->value);
}

TEST(SegmentationModel, ResolutionMismatchThrows) {
    std::mt19937_64 rng(3);
    SegmentationModel<float> model(tiny_seg(2), 1);
    EXPECT_THROW(model.forward(random_image(rng, 16)), DimensionError);
}

TEST(SegmentationModel, InvalidConfigRejected) {
    auto cfg = tiny_seg(2);
    cfg.resolution = 10;
    EXPECT_THROW(SegmentationModel<float>{cfg}, ModelConfigError);
    cfg = tiny_seg(0);
    EXPECT_THROW(SegmentationModel<float>{cfg}, ModelConfigError);
}

TEST(SegmentationModel, BatchEqualsStackedSingles) {
    std::mt19937_64 rng(4);
    SegmentationModel<float> model(tiny_seg(2), 5);
    std::vector<ImageSample> images{random_image(rng, 8), random_image(rng, 8), random_image(rng, 8)};
    const auto batch = model.forward_batch(images);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto single = model.forward(images[i]);
        for (std::size_t k = 0; k < single.values.size(); ++k) {
            EXPECT_NEAR(batch[i].values[k], single.values[k], 1e-5);
        }
    }
}

TEST(StyleClassifier, ProbabilitiesAreADistribution) {
    std::mt19937_64 rng(5);
    StyleClassifier<float> cls(tiny_cls(3), 2);
    const auto mask = styleseg::testing::rect(8, 8, 2, 2, 3, 3);
    const auto p = cls.forward(random_image(rng, 8), mask);
    ASSERT_EQ(p.styles(), 3);
    float s = 0;
    for (float v : p.p) {
        EXPECT_GT(v, 0.0f);
        s += v;
    }
    EXPECT_NEAR(s, 1.0f, 1e-5f);
}

TEST(StyleClassifier, RejectsSingleStyle) { EXPECT_THROW(StyleClassifier<float>{tiny_cls(1)}, ModelConfigError); }

TEST(StyleClassifier, MaskChannelIsRawBinary) {
    std::mt19937_64 rng(6);
    const auto mask = styleseg::testing::rect(8, 8, 0, 0, 4, 8);
    const auto t = StyleClassifier<float>::input_tensor(random_image(rng, 8), mask);
    EXPECT_EQ(t.channels, 4);
    EXPECT_EQ(t(3, 0, 0), 1.0f);
    EXPECT_EQ(t(3, 7, 7), 0.0f);
}

TEST(JointModels, EndToEndParameterGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    SegmentationModel<double> seg(tiny_seg(3), 3);
    StyleClassifier<double> cls(tiny_cls(3), 4);
    const auto image = random_image(rng, 8);
    const auto gt = styleseg::testing::rect(8, 8, 2, 1, 4, 5);
    const auto x_seg = image_tensor<double>(image);
    const auto x_cls = StyleClassifier<double>::input_tensor(image, gt);

    typename SegmentationModel<double>::Cache sc;
    typename StyleClassifier<double>::Cache cc;
    const auto preds = seg.forward(x_seg, sc);
    const auto p = cls.forward(x_cls, cc);
    const int m_star = best_style_index(gt, preds, 1.0);

    auto loss = [&] {
        typename SegmentationModel<double>::Cache s;
        typename StyleClassifier<double>::Cache c;
        const auto pr = seg.forward(x_seg, s);
        const auto pp = cls.forward(x_cls, c);
        return loss_l1(gt, pr, m_star, 1.0) + loss_l2(gt, pr, pp, 1.0) + loss_l3(pp, m_star);
    };

    LossGradient<double> g(preds);
    loss_l1(gt, preds, m_star, 1.0, &g);
    loss_l2(gt, preds, p, 1.0, &g);
    loss_l3(p, m_star, &g);
    for (auto* prm : seg.parameters()) prm->zero_grad();
    for (auto* prm : cls.parameters()) prm->zero_grad();
    seg.backward(sc, g.preds);
    cls.backward(cc, g.probs);

    auto check = [&](std::vector<nn::Parameter<double>*> params) {
        for (auto* prm : params) {
            std::vector<double> numeric(prm->value.size());
            for (std::size_t i = 0; i < prm->value.size(); ++i) {
                const double keep = prm->value[i];
                prm->value[i] = keep + 1e-6;
                const double up = loss();
                prm->value[i] = keep - 1e-6;
                const double down = loss();
                prm->value[i] = keep;
                numeric[i] = (up - down) / 2e-6;
            }
            EXPECT_LT(relative_error(prm->grad, numeric), 1e-4) << prm->name;
        }
    };
    check(seg.parameters());
    check(cls.parameters());
}
