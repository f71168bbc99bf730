#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "vlpt/graph.hpp"
#include "vlpt/rng.hpp"

using namespace vlpt;

namespace {

// reduce any node to a scalar with fixed pseudo-random weights so gradient
// signal reaches every output element
int wsum(GraphD& g, int x) {
    Rng wr(4242);
    std::vector<double> w(static_cast<size_t>(g.val(x).numel()));
    for (auto& v : w) v = wr.uniform(-1.0, 1.0);
    const auto shape = g.val(x).shape;
    int flat = g.reshape(x, {g.val(x).numel()});
    return g.weighted_sum(flat, w);
}

struct OpCase {
    std::string name;
    std::vector<std::vector<int64_t>> shapes;
    std::function<int(GraphD&, const std::vector<int>&)> build;
    double lo = -1.0, hi = 1.0;
    bool avoid_zero = false;
};

void run_case(const OpCase& c) {
    CAPTURE(c.name);
    Rng rng(1234 + static_cast<uint64_t>(c.name.size()));
    std::vector<ParamT<double>> params;
    params.reserve(c.shapes.size());
    for (size_t i = 0; i < c.shapes.size(); ++i) {
        params.emplace_back(c.name + "_p" + std::to_string(i), c.shapes[i]);
        testutil::fill_uniform(params.back().value, rng, c.lo, c.hi);
        if (c.avoid_zero) {
            for (auto& v : params.back().value.data) {
                if (std::abs(v) < 0.05) v = v < 0 ? -0.1 : 0.1;
            }
        }
    }

    auto eval = [&]() {
        GraphD g;
        std::vector<int> ids;
        for (auto& p : params) ids.push_back(g.param(p));
        return g.val(c.build(g, ids)).data[0];
    };

    // analytic gradients
    {
        GraphD g;
        std::vector<int> ids;
        for (auto& p : params) ids.push_back(g.param(p));
        g.backward(c.build(g, ids));
    }

    Rng pick(77);
    for (auto& p : params) {
        const int samples = static_cast<int>(std::min<int64_t>(10, p.value.numel()));
        const double err = testutil::max_fd_error(p.value, p.grad, eval, 1e-5, pick, samples);
        CAPTURE(p.name);
        CHECK(err < 1e-6);
    }
}

} // namespace

TEST_CASE("finite differences validate every graph op") {
    std::vector<OpCase> cases;

    cases.push_back({"add", {{3, 4}, {3, 4}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.add(in[0], in[1]));
                     }});
    cases.push_back({"sub", {{3, 4}, {3, 4}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.sub(in[0], in[1]));
                     }});
    cases.push_back({"mul", {{3, 4}, {3, 4}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.mul(in[0], in[1]));
                     }});
    cases.push_back({"scale", {{3, 4}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.scale(in[0], -2.5));
                     }});
    cases.push_back({"add_bias", {{4, 5}, {5}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.add_bias(in[0], in[1]));
                     }});
    cases.push_back({"matmul_nn", {{3, 5}, {5, 4}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.matmul(in[0], in[1], false));
                     }});
    cases.push_back({"matmul_nt", {{3, 5}, {4, 5}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.matmul(in[0], in[1], true));
                     }});
    cases.push_back({"bmm_nn", {{2, 3, 5}, {2, 5, 4}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.bmm(in[0], in[1], false));
                     }});
    cases.push_back({"bmm_nt", {{2, 3, 5}, {2, 4, 5}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.bmm(in[0], in[1], true));
                     }});
    cases.push_back({"linear", {{6, 4}, {3, 4}, {3}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.linear(in[0], in[1], in[2]));
                     }});
    cases.push_back({"conv2d", {{2, 3, 6, 5}, {4, 3, 3, 3}, {4}},
                     [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.conv2d(in[0], in[1], in[2], 1, 1));
                     }});
    cases.push_back({"conv2d_stride2", {{1, 2, 8, 8}, {3, 2, 3, 3}, {3}},
                     [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.conv2d(in[0], in[1], in[2], 2, 1));
                     }});
    cases.push_back({"conv1x1_stride2", {{1, 4, 8, 8}, {2, 4, 1, 1}, {2}},
                     [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.conv2d(in[0], in[1], in[2], 2, 0));
                     }});
    OpCase relu_case{"relu", {{4, 7}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.relu(in[0]));
                     }};
    relu_case.avoid_zero = true;
    cases.push_back(relu_case);
    cases.push_back({"gelu", {{4, 7}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.gelu(in[0]));
                     }});
    cases.push_back({"layer_norm", {{5, 8}, {8}, {8}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.layer_norm(in[0], in[1], in[2], 1e-5));
                     }});
    cases.push_back({"group_norm", {{2, 6, 3, 4}, {6}, {6}},
                     [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.group_norm(in[0], in[1], in[2], 3, 1e-5));
                     }});
    cases.push_back({"softmax", {{5, 9}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.softmax_last(in[0]));
                     }});
    cases.push_back({"embedding", {{6, 4}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.embedding(in[0], {1, 3, 3, 0, 5}, {5, 4}));
                     }});
    cases.push_back({"concat_dim1", {{2, 3, 4}, {2, 2, 4}},
                     [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.concat_dim1(in[0], in[1]));
                     }});
    cases.push_back({"slice_dim1", {{2, 5, 3}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.slice_dim1(in[0], 1, 3));
                     }});
    cases.push_back({"concat_cols", {{4, 3}, {4, 2}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.concat_cols(in[0], in[1]));
                     }});
    cases.push_back({"transpose2d", {{4, 6}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.transpose2d(in[0]));
                     }});
    cases.push_back({"split_merge_heads", {{2, 5, 8}}, [](GraphD& g, const std::vector<int>& in) {
                         int s = g.split_heads(in[0], 4);
                         int b = g.bmm(s, s, true); // use the heads
                         return wsum(g, g.merge_heads(g.bmm(b, s, false), 4));
                     }});
    cases.push_back({"mean_dim1", {{3, 4, 5}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.mean_dim1(in[0]));
                     }});
    cases.push_back({"flatten_grid", {{2, 3, 4, 5}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.flatten_grid(in[0]));
                     }});
    cases.push_back({"bilinear_up", {{1, 2, 4, 6}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.bilinear_resize(in[0], 8, 12));
                     }});
    cases.push_back({"bilinear_x4", {{1, 2, 3, 3}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.bilinear_resize(in[0], 12, 12));
                     }});
    cases.push_back({"avgpool2x2", {{2, 3, 4, 6}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.avgpool2x2(in[0]));
                     }});
    OpCase l2n{"l2_normalize", {{5, 6}}, [](GraphD& g, const std::vector<int>& in) {
                   return wsum(g, g.l2_normalize_rows(in[0]));
               }};
    l2n.lo = 0.2;
    l2n.hi = 1.0;
    cases.push_back(l2n);
    cases.push_back({"rowwise_dot", {{5, 6}, {5, 6}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.rowwise_dot(in[0], in[1]));
                     }});
    cases.push_back({"gather_rows_nd", {{3, 4, 5}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.gather_rows_nd(in[0], {0, 7, 7, 11, 3}));
                     }});
    cases.push_back({"ce_rows", {{6, 5}}, [](GraphD& g, const std::vector<int>& in) {
                         int ce = g.ce_rows(in[0], {0, 3, -1, 2, 4, -1}, -1);
                         return wsum(g, ce);
                     }});
    cases.push_back({"sum_all", {{3, 7}}, [](GraphD& g, const std::vector<int>& in) {
                         return g.sum_all(in[0]);
                     }});
    cases.push_back({"scale_by_exp", {{4, 4}, {}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.scale_by_exp(in[0], in[1]));
                     }});
    cases.push_back({"combine_scalars", {{2, 2}, {3, 3}},
                     [](GraphD& g, const std::vector<int>& in) {
                         int a = g.sum_all(in[0]);
                         int b = g.sum_all(in[1]);
                         return g.combine_scalars({a, b}, {0.5, 2.0});
                     }});
    cases.push_back({"dropout", {{6, 8}}, [](GraphD& g, const std::vector<int>& in) {
                         return wsum(g, g.dropout(in[0], 0.35));
                     }});
    cases.push_back({"softmax_consumed_twice", {{3, 6}},
                     [](GraphD& g, const std::vector<int>& in) {
                         int sm = g.softmax_last(in[0]);
                         int a = wsum(g, sm);
                         int b = g.sum_all(g.mul(sm, sm));
                         return g.combine_scalars({a, b}, {1.0, 1.0});
                     }});

    for (const auto& c : cases) run_case(c);
}

TEST_CASE("backward accumulates into bound params across fan-out") {
    ParamT<double> p("w", {2, 2});
    p.value.data = {1.0, 2.0, 3.0, 4.0};
    GraphD g;
    int w = g.param(p);
    int y = g.add(w, w); // dL/dw = 2 per element through fan-out
    g.backward(g.sum_all(y));
    for (auto v : p.grad.data) CHECK(v == doctest::Approx(2.0));
}

TEST_CASE("dropout is seed-deterministic and an identity when disabled") {
    TensorD x({4, 5});
    for (int64_t i = 0; i < x.numel(); ++i) x[size_t(i)] = double(i + 1);

    GraphD g1(true, 42), g2(true, 42), g3(true, 43);
    const auto& y1 = g1.val(g1.dropout(g1.input(x), 0.5));
    const auto& y2 = g2.val(g2.dropout(g2.input(x), 0.5));
    const auto& y3 = g3.val(g3.dropout(g3.input(x), 0.5));
    CHECK(y1.data == y2.data);
    CHECK(y1.data != y3.data);
    // surviving entries are scaled by 1/(1-p)
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double v = y1[size_t(i)];
        CHECK((v == 0.0 || v == doctest::Approx(x[size_t(i)] * 2.0)));
    }

    GraphD ge(false, 42);
    int in = ge.input(x);
    CHECK(ge.dropout(in, 0.5) == in); // evaluation graphs pass through
    GraphD gz(true, 42);
    int in2 = gz.input(x);
    CHECK(gz.dropout(in2, 0.0) == in2);
}

TEST_CASE("evaluation graphs record no backward state") {
    ParamT<double> p("w", {2, 2});
    p.value.fill(1.0);
    GraphD g(false);
    int w = g.param(p);
    int y = g.relu(w);
    CHECK_FALSE(g.needs_grad(y));
    CHECK_THROWS(g.backward(g.sum_all(y)));
}

TEST_CASE("l2_normalize rejects zero rows") {
    GraphD g;
    TensorD x({2, 3});
    x.fill(0.0);
    int id = g.input(std::move(x));
    CHECK_THROWS(g.l2_normalize_rows(id));
}

TEST_CASE("ce_rows with uniform logits equals log C") {
    GraphD g;
    TensorD x({3, 16});
    x.fill(0.7);
    int ce = g.ce_rows(g.input(std::move(x)), {5, 0, 15}, -1);
    for (auto v : g.val(ce).data) CHECK(v == doctest::Approx(std::log(16.0)).epsilon(1e-12));
}
