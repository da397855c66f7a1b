#include "promptseg/embedding.hpp"
#include "promptseg/error.hpp"
#include "test_support.hpp"

#include <doctest.h>

using namespace promptseg;

TEST_CASE("normalize_rows scales a 3-4-5 row") {
    Matrix m(1, 2);
    m << 3, 4;
    const Matrix n = normalize_rows(m);
    CHECK(n(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(n(0, 1) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("normalize_rows leaves unit rows unchanged") {
    const Matrix id = Matrix::Identity(2, 2);
    CHECK(normalize_rows(id) == id);
}

TEST_CASE("normalize_rows rejects zero rows") {
    Matrix m = Matrix::Zero(1, 2);
    try {
        normalize_rows(m);
        FAIL("expected ZeroVectorRow");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ZeroVectorRow);
    }
}

TEST_CASE("normalize_rows is idempotent and scale invariant") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-3, 3), scale(0.01, 100);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix m(5, 4);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 4; ++j) m(i, j) = u(rng);
        const Matrix once = normalize_rows(m);
        CHECK((normalize_rows(once) - once).cwiseAbs().maxCoeff() < 1e-12);
        for (int i = 0; i < 5; ++i) CHECK(std::abs(once.row(i).norm() - 1.0) < 1e-9);
        const Matrix scaled = normalize_rows(m * scale(rng));
        CHECK((scaled - once).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("EmbeddingBatch enforces its invariants") {
    Matrix one = Matrix::Identity(1, 2);
    CHECK_THROWS_AS(EmbeddingBatch(one, one), Error);
    Matrix not_unit(2, 2);
    not_unit << 1, 1, 0, 1;
    CHECK_THROWS_AS(EmbeddingBatch(not_unit, Matrix::Identity(2, 2)), Error);
    CHECK_NOTHROW(EmbeddingBatch(Matrix::Identity(2, 2), Matrix::Identity(2, 2)));
}

TEST_CASE("similarity_matrix examples") {
    SUBCASE("orthonormal pairs give the identity") {
        EmbeddingBatch batch(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
        CHECK(similarity_matrix(batch, Direction::ImageToText).values == Matrix::Identity(2, 2));
    }
    SUBCASE("identical rows give all ones") {
        Matrix m(3, 2);
        m << 0.6, 0.8, 0.6, 0.8, 0.6, 0.8;
        EmbeddingBatch batch(m, m);
        CHECK((similarity_matrix(batch, Direction::ImageToText).values - Matrix::Ones(3, 3))
                  .cwiseAbs()
                  .maxCoeff() < 1e-12);
    }
    SUBCASE("direct dot products") {
        Matrix img(2, 2), txt(2, 2);
        img << 1, 0, 0, 1;
        txt << 0.6, 0.8, 0.8, 0.6;
        EmbeddingBatch batch(img, txt);
        Matrix expected(2, 2);
        expected << 0.6, 0.8, 0.8, 0.6;
        CHECK((similarity_matrix(batch, Direction::ImageToText).values - expected)
                  .cwiseAbs()
                  .maxCoeff() < 1e-12);
    }
}

TEST_CASE("image_to_text is the exact transpose of text_to_image") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        EmbeddingBatch batch(testing_support::random_unit_rows(6, 5, rng),
                             testing_support::random_unit_rows(6, 5, rng));
        const Matrix vt = similarity_matrix(batch, Direction::ImageToText).values;
        const Matrix tv = similarity_matrix(batch, Direction::TextToImage).values;
        CHECK(vt == tv.transpose());
        CHECK(vt.cwiseAbs().maxCoeff() <= 1.0 + 1e-9);
    }
}
