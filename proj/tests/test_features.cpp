#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "relrisk/common.hpp"
#include "relrisk/features.hpp"
#include "relrisk/ingest.hpp"
#include "relrisk/synth.hpp"

using namespace relrisk;

namespace {

FeatureMatrix make_matrix(std::vector<std::string> names, size_t n_rows,
                          std::vector<double> values) {
  FeatureMatrix fm;
  fm.row_ids.resize(n_rows);
  std::iota(fm.row_ids.begin(), fm.row_ids.end(), 1);
  for (auto& name : names) fm.columns.push_back({name, Lineage::raw, false, {}});
  fm.values = std::move(values);
  REQUIRE(fm.values.size() == n_rows * fm.columns.size());
  return fm;
}

std::vector<size_t> all_rows(const FeatureMatrix& fm) {
  std::vector<size_t> rows(fm.n_rows());
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------
// Quantiles and EDA

TEST_CASE("type-7 quantiles match the linear-interpolation oracle") {
  // Frozen values from an independent implementation of the same rule.
  std::vector<double> ys = {3.1, -2.0, 0.5, 7.25, 4.0, -1.5, 2.0, 0.0};
  std::sort(ys.begin(), ys.end());
  CHECK(quantile_type7(ys, 0.25) == doctest::Approx(-0.375).epsilon(1e-12));
  CHECK(quantile_type7(ys, 0.5) == doctest::Approx(1.25).epsilon(1e-12));
  CHECK(quantile_type7(ys, 0.75) == doctest::Approx(3.325).epsilon(1e-12));
  CHECK(quantile_type7(ys, 0.1) == doctest::Approx(-1.65).epsilon(1e-12));

  std::vector<double> zs = {1.0, 2.0, 3.0, 4.0};
  CHECK(quantile_type7(zs, 0.25) == doctest::Approx(1.75).epsilon(1e-12));
  CHECK(quantile_type7(zs, 0.5) == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(quantile_type7(zs, 0.0) == 1.0);
  CHECK(quantile_type7(zs, 1.0) == 4.0);
}

TEST_CASE("constant column profiles to zero skew and zero outliers") {
  auto fm = make_matrix({"C"}, 5, {7.0, 7.0, 7.0, 7.0, 7.0});
  auto report = eda_profile(fm, {0, 0, 1, 0, 0});
  REQUIRE(report.columns.size() == 1);
  CHECK(report.columns[0].skewness == 0.0);
  CHECK(report.columns[0].outlier_fraction == 0.0);
  CHECK(report.columns[0].missing_rate == 0.0);
  CHECK(report.label_positive_rate == doctest::Approx(0.2));
}

TEST_CASE("outlier fraction of {0,0,0,100} is 0.25") {
  // Q1=0, Q3=25, IQR=25, fences [-37.5, 62.5]; only 100 falls outside.
  auto fm = make_matrix({"X"}, 4, {0.0, 0.0, 0.0, 100.0});
  auto report = eda_profile(fm, {});
  CHECK(report.columns[0].outlier_fraction == doctest::Approx(0.25));
}

TEST_CASE("adjusted Fisher-Pearson skewness matches frozen oracle values") {
  auto fm = make_matrix({"A", "B"}, 5,
                        {1.0, 3.1, 2.0, -2.0, 3.0, 0.5, 4.0, 7.25, 100.0, 4.0});
  // Column B only has 5 of the 8 oracle values; rebuild properly below.
  auto fa = make_matrix({"A"}, 5, {1.0, 2.0, 3.0, 4.0, 100.0});
  auto ra = eda_profile(fa, {});
  CHECK(ra.columns[0].skewness == doctest::Approx(2.232395911636458).epsilon(1e-12));

  auto fb = make_matrix({"B"}, 8, {3.1, -2.0, 0.5, 7.25, 4.0, -1.5, 2.0, 0.0});
  auto rb = eda_profile(fb, {});
  CHECK(rb.columns[0].skewness == doctest::Approx(0.6654576691396401).epsilon(1e-12));
}

TEST_CASE("missing values are excluded from profile statistics") {
  auto fm = make_matrix({"M"}, 4, {1.0, kMissing, 3.0, kMissing});
  auto report = eda_profile(fm, {});
  CHECK(report.columns[0].missing_rate == doctest::Approx(0.5));
  CHECK(report.columns[0].n_present == 2);
  CHECK(report.columns[0].mean == doctest::Approx(2.0));
}

TEST_CASE("eda report counting helpers and serialization") {
  auto fm = make_matrix({"A", "B"}, 5,
                        {1.0, kMissing, 2.0, kMissing, 3.0, kMissing, 4.0, kMissing, 100.0, 1.0});
  auto report = eda_profile(fm, {});
  CHECK(report.count_missing_above(0.5) == 1);  // B is 80% missing
  CHECK(report.to_json().find("missing_rate") != std::string::npos);
  CHECK(report.to_text().find("eda profile") != std::string::npos);
}

// ---------------------------------------------------------------------------
// Feature engineering

TEST_CASE("engineer_features: ratios, repayment, utilization, roll-ups") {
  // Three customers: one with rich children, one with none, one with
  // zero-denominator edge cases; plus one orphan bureau row.
  RelationalDataset fixture;
  fixture.schema = default_schema();

  Table app;
  app.name = "application";
  app.n_rows = 3;
  {
    Column id;
    id.name = "SK_ID_CURR";
    id.kind = ColumnKind::key;
    id.keys = {1, 2, 3};
    Column target;
    target.name = "TARGET";
    target.kind = ColumnKind::numeric;
    target.nums = {0.0, 1.0, 0.0};
    Column credit;
    credit.name = "AMT_CREDIT";
    credit.kind = ColumnKind::numeric;
    credit.nums = {100000.0, 60000.0, 90000.0};
    Column income;
    income.name = "AMT_INCOME_TOTAL";
    income.kind = ColumnKind::numeric;
    income.nums = {50000.0, 30000.0, 0.0};  // customer 3: zero income
    Column annuity;
    annuity.name = "AMT_ANNUITY";
    annuity.kind = ColumnKind::numeric;
    annuity.nums = {5000.0, kMissing, 4500.0};
    Column fam;
    fam.name = "CNT_FAM_MEMBERS";
    fam.kind = ColumnKind::numeric;
    fam.nums = {2.0, 0.0, 3.0};  // customer 2: zero members
    Column gender;
    gender.name = "CODE_GENDER";
    gender.kind = ColumnKind::categorical;
    gender.intern("F");
    gender.intern("M");
    gender.intern("F");
    app.columns = {id, target, credit, income, annuity, fam, gender};
  }
  fixture.tables.emplace("application", std::move(app));

  Table bureau;
  bureau.name = "bureau";
  bureau.n_rows = 3;
  {
    Column id;
    id.name = "SK_ID_BUREAU";
    id.kind = ColumnKind::key;
    id.keys = {11, 12, 13};
    Column curr;
    curr.name = "SK_ID_CURR";
    curr.kind = ColumnKind::key;
    curr.keys = {1, 1, 999};  // third row is an orphan
    Column sum;
    sum.name = "AMT_CREDIT_SUM";
    sum.kind = ColumnKind::numeric;
    sum.nums = {10.0, 30.0, 1000.0};
    bureau.columns = {id, curr, sum};
  }
  fixture.tables.emplace("bureau", std::move(bureau));

  Table prev;
  prev.name = "previous_application";
  prev.n_rows = 1;
  {
    Column id;
    id.name = "SK_ID_PREV";
    id.kind = ColumnKind::key;
    id.keys = {100};
    Column curr;
    curr.name = "SK_ID_CURR";
    curr.kind = ColumnKind::key;
    curr.keys = {1};
    prev.columns = {id, curr};
  }
  fixture.tables.emplace("previous_application", std::move(prev));

  Table ins;
  ins.name = "installments_payments";
  ins.n_rows = 2;
  {
    Column pid;
    pid.name = "SK_ID_PREV";
    pid.kind = ColumnKind::key;
    pid.keys = {100, 100};
    Column curr;
    curr.name = "SK_ID_CURR";
    curr.kind = ColumnKind::key;
    curr.keys = {1, 1};
    Column due;
    due.name = "AMT_INSTALMENT";
    due.kind = ColumnKind::numeric;
    due.nums = {1000.0, 2000.0};
    Column pay;
    pay.name = "AMT_PAYMENT";
    pay.kind = ColumnKind::numeric;
    pay.nums = {1000.0, 1000.0};  // ratios 1.0 and 0.5
    Column dd;
    dd.name = "DAYS_INSTALMENT";
    dd.kind = ColumnKind::numeric;
    dd.nums = {-30.0, -60.0};
    Column pd;
    pd.name = "DAYS_ENTRY_PAYMENT";
    pd.kind = ColumnKind::numeric;
    pd.nums = {-32.0, -55.0};  // second is late (paid after due)
    ins.columns = {pid, curr, due, pay, dd, pd};
  }
  fixture.tables.emplace("installments_payments", std::move(ins));

  Table pos;
  pos.name = "pos_cash_balance";
  pos.n_rows = 0;
  {
    Column pid;
    pid.name = "SK_ID_PREV";
    pid.kind = ColumnKind::key;
    Column curr;
    curr.name = "SK_ID_CURR";
    curr.kind = ColumnKind::key;
    pos.columns = {pid, curr};
  }
  fixture.tables.emplace("pos_cash_balance", std::move(pos));

  Table cc;
  cc.name = "credit_card_balance";
  cc.n_rows = 2;
  {
    Column pid;
    pid.name = "SK_ID_PREV";
    pid.kind = ColumnKind::key;
    pid.keys = {100, 100};
    Column curr;
    curr.name = "SK_ID_CURR";
    curr.kind = ColumnKind::key;
    curr.keys = {1, 1};
    Column bal;
    bal.name = "AMT_BALANCE";
    bal.kind = ColumnKind::numeric;
    bal.nums = {50.0, 30.0};
    Column lim;
    lim.name = "AMT_CREDIT_LIMIT_ACTUAL";
    lim.kind = ColumnKind::numeric;
    lim.nums = {100.0, 0.0};  // zero limit must not divide
    cc.columns = {pid, curr, bal, lim};
  }
  fixture.tables.emplace("credit_card_balance", std::move(cc));

  auto fm = engineer_features(fixture);
  REQUIRE(fm.n_rows() == 3);
  auto col = [&](const std::string& name, size_t row) {
    const int c = fm.col_index(name);
    REQUIRE(c >= 0);
    return fm.at(row, static_cast<size_t>(c));
  };

  // Identifiers and the label never appear as feature columns.
  CHECK(fm.col_index("SK_ID_CURR") < 0);
  CHECK(fm.col_index("TARGET") < 0);

  // Affordability ratios with zero-denominator guards.
  CHECK(col("CREDIT_INCOME", 0) == doctest::Approx(2.0));
  CHECK(col("CREDIT_INCOME", 1) == doctest::Approx(2.0));
  CHECK(is_missing(col("CREDIT_INCOME", 2)));   // zero income
  CHECK(is_missing(col("ANNUITY_INCOME", 1)));  // missing annuity
  CHECK(col("LOAN_PER_FAM", 0) == doctest::Approx(50000.0));
  CHECK(is_missing(col("LOAN_PER_FAM", 1)));    // zero family size

  // Repayment aggregates: ratios {1.0, 0.5}, one late of two dated rows.
  CHECK(col("INS_PAYMENT_RATIO_MEAN", 0) == doctest::Approx(0.75));
  CHECK(col("INS_PAYMENT_RATIO_STD", 0) ==
        doctest::Approx(std::sqrt(0.125)));  // sample std of {1.0, 0.5}
  CHECK(col("INS_LATE_RATE", 0) == doctest::Approx(0.5));
  CHECK(col("INS_PAYMENT_BURDEN", 0) == doctest::Approx(0.375));

  // Customers without installments get missing aggregates, count 0.
  CHECK(is_missing(col("INS_PAYMENT_RATIO_MEAN", 1)));
  CHECK(is_missing(col("INS_LATE_RATE", 2)));
  CHECK(col("INS_COUNT", 1) == 0.0);

  // Utilization: zero limit row contributes nothing.
  CHECK(col("CC_UTILIZATION_MEAN", 0) == doctest::Approx(0.5));
  CHECK(is_missing(col("CC_UTILIZATION_STD", 0)));  // single usable row
  CHECK(is_missing(col("CC_UTILIZATION_MEAN", 1)));

  // Bureau roll-ups exclude the orphan row.
  CHECK(col("BUREAU_COUNT", 0) == 2.0);
  CHECK(col("BUREAU_COUNT", 2) == 0.0);
  CHECK(col("BUREAU_AMT_CREDIT_SUM_MEAN", 0) == doctest::Approx(20.0));
  CHECK(col("BUREAU_AMT_CREDIT_SUM_MAX", 0) == doctest::Approx(30.0));
  CHECK(is_missing(col("BUREAU_AMT_CREDIT_SUM_MEAN", 1)));

  // Categorical columns carried with codes + dict.
  const auto& gender_col = fm.column("CODE_GENDER");
  CHECK(gender_col.categorical);
  REQUIRE(gender_col.dict.size() == 2);
  CHECK(gender_col.dict[0] == "F");

  // Scale equivariance of the ratio equations: doubling numerator and
  // denominator leaves the value unchanged (here: customers 1 and 2 share
  // CREDIT/INCOME = 2 despite different magnitudes).
  CHECK(col("CREDIT_INCOME", 0) == col("CREDIT_INCOME", 1));

  // Lineage covers every column.
  for (const auto& meta : fm.columns)
    CHECK((meta.lineage == Lineage::raw || meta.lineage == Lineage::engineered));
}

// ---------------------------------------------------------------------------
// Target encoding

namespace {

FeatureMatrix categorical_fixture(size_t n, const std::vector<int>& codes,
                                  const std::vector<std::string>& dict) {
  FeatureMatrix fm;
  fm.row_ids.resize(n);
  std::iota(fm.row_ids.begin(), fm.row_ids.end(), 1);
  fm.columns.push_back({"CAT", Lineage::raw, true, dict});
  fm.values.resize(n);
  for (size_t r = 0; r < n; ++r)
    fm.values[r] = codes[r] < 0 ? kMissing : static_cast<double>(codes[r]);
  return fm;
}

}  // namespace

TEST_CASE("target encoding: hand-counted rates 0.10 and 0.30") {
  // 20 rows: category A rows 0..9 with 1 positive, B rows 10..19 with 3.
  std::vector<int> codes(20);
  std::vector<int> labels(20, 0);
  for (size_t r = 0; r < 20; ++r) codes[r] = r < 10 ? 0 : 1;
  labels[3] = 1;
  labels[11] = labels[15] = labels[19] = 1;
  auto fm = categorical_fixture(20, codes, {"A", "B"});

  std::vector<size_t> train(20);
  std::iota(train.begin(), train.end(), 0);
  target_encode(fm, "CAT", labels, train);

  const int te = fm.col_index("CAT_TE");
  REQUIRE(te >= 0);
  CHECK(fm.columns[static_cast<size_t>(te)].lineage == Lineage::target_encoded);
  for (size_t r = 0; r < 10; ++r) CHECK(fm.at(r, te) == doctest::Approx(0.10));
  for (size_t r = 10; r < 20; ++r) CHECK(fm.at(r, te) == doctest::Approx(0.30));
}

TEST_CASE("target encoding fallbacks") {
  SUBCASE("category only outside train gets the global rate") {
    auto fm = categorical_fixture(4, {0, 0, 0, 1}, {"A", "B"});
    std::vector<int> labels = {1, 0, 0, 1};
    target_encode(fm, "CAT", labels, {0, 1, 2});  // B never in train
    const int te = fm.col_index("CAT_TE");
    CHECK(fm.at(3, te) == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("single all-train category equals the overall rate") {
    auto fm = categorical_fixture(4, {0, 0, 0, 0}, {"A"});
    std::vector<int> labels = {1, 0, 1, 0};
    target_encode(fm, "CAT", labels, {0, 1, 2, 3});
    const int te = fm.col_index("CAT_TE");
    for (size_t r = 0; r < 4; ++r) CHECK(fm.at(r, te) == doctest::Approx(0.5));
  }
  SUBCASE("missing category is its own group when seen in train") {
    auto fm = categorical_fixture(4, {-1, -1, 0, 0}, {"A"});
    std::vector<int> labels = {1, 1, 0, 0};
    target_encode(fm, "CAT", labels, {0, 1, 2, 3});
    const int te = fm.col_index("CAT_TE");
    CHECK(fm.at(0, te) == doctest::Approx(1.0));
    CHECK(fm.at(2, te) == doctest::Approx(0.0));
  }
  SUBCASE("validation labels never leak into encodings") {
    auto fm = categorical_fixture(6, {0, 1, 0, 1, 0, 1}, {"A", "B"});
    std::vector<int> labels = {1, 0, 0, 1, 1, 0};
    std::vector<size_t> train = {0, 1, 2, 3};
    auto fm2 = fm;
    std::vector<int> permuted = labels;
    std::swap(permuted[4], permuted[5]);  // permute validation labels only
    target_encode(fm, "CAT", labels, train);
    target_encode(fm2, "CAT", permuted, train);
    const int te = fm.col_index("CAT_TE");
    for (size_t r = 0; r < 6; ++r) CHECK(fm.at(r, te) == fm2.at(r, te));
  }
  SUBCASE("numeric column rejected") {
    auto fm = make_matrix({"N"}, 3, {1.0, 2.0, 3.0});
    CHECK_THROWS_AS(target_encode(fm, "N", {0, 1, 0}, {0, 1, 2}), DataError);
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

TEST_CASE("columns above the missing threshold are dropped everywhere") {
  std::vector<double> values;
  for (size_t r = 0; r < 10; ++r) {
    values.push_back(static_cast<double>(r));          // KEEP
    values.push_back(r == 0 ? 1.0 : kMissing);         // DROP: 90% missing
  }
  auto fm = make_matrix({"KEEP", "DROP"}, 10, values);
  auto state = fit_preprocess(fm, all_rows(fm), {});
  REQUIRE(state.dropped_columns.size() == 1);
  CHECK(state.dropped_columns[0] == "DROP");
  auto out = apply_preprocess(state, fm);
  CHECK(out.col_index("DROP") < 0);
  CHECK(out.col_index("KEEP") >= 0);
}

TEST_CASE("signed log1p analytic values") {
  CHECK(signed_log1p(0.0) == 0.0);
  CHECK(signed_log1p(std::exp(1.0) - 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(signed_log1p(-(std::exp(1.0) - 1.0)) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(is_missing(signed_log1p(kMissing)));
}

TEST_CASE("robust-scaled columns have zero train median; standard columns zero mean") {
  Rng rng(17);
  const size_t n = 200;
  std::vector<double> values;
  for (size_t r = 0; r < n; ++r) {
    values.push_back(std::exp(2.0 * rng.normal()) * 1000.0);  // AMT_X: heavy tail
    values.push_back(rng.normal() * 3.0 + 5.0);               // PLAIN
  }
  auto fm = make_matrix({"AMT_X", "PLAIN"}, n, values);
  auto train = all_rows(fm);
  train.resize(150);
  auto state = fit_preprocess(fm, train, {});
  auto out = apply_preprocess(state, fm);

  const int amt = out.col_index("AMT_X");
  const int plain = out.col_index("PLAIN");
  REQUIRE(amt >= 0);
  REQUIRE(plain >= 0);
  CHECK(out.column("AMT_X").lineage == Lineage::scaled);

  std::vector<double> amt_train;
  double plain_sum = 0.0;
  for (size_t r : train) {
    amt_train.push_back(out.at(r, amt));
    plain_sum += out.at(r, plain);
  }
  std::sort(amt_train.begin(), amt_train.end());
  CHECK(std::abs(quantile_type7(amt_train, 0.5)) < 1e-9);
  CHECK(std::abs(plain_sum / train.size()) < 1e-9);

  // IQR of the robust column is 1 after scaling.
  CHECK(quantile_type7(amt_train, 0.75) - quantile_type7(amt_train, 0.25) ==
        doctest::Approx(1.0).epsilon(1e-9));

  // No missing values remain.
  for (size_t r = 0; r < out.n_rows(); ++r)
    for (size_t c = 0; c < out.n_cols(); ++c) CHECK_FALSE(is_missing(out.at(r, c)));
}

TEST_CASE("degenerate scales fall back to centering with scale 1") {
  auto fm = make_matrix({"CONST", "AMT_CONST"}, 4, {5.0, 2.0, 5.0, 2.0, 5.0, 2.0, 5.0, 2.0});
  auto state = fit_preprocess(fm, all_rows(fm), {});
  auto out = apply_preprocess(state, fm);
  for (size_t r = 0; r < 4; ++r) {
    CHECK(out.at(r, out.col_index("CONST")) == 0.0);      // (5-5)/1
    CHECK(out.at(r, out.col_index("AMT_CONST")) == 0.0);  // centered at log1p(2)
  }
}

TEST_CASE("centering can be disabled for standard-scaled columns") {
  auto fm = make_matrix({"X"}, 4, {2.0, 4.0, 6.0, 8.0});
  PreprocessConfig config;
  config.center_standardized = false;
  auto state = fit_preprocess(fm, all_rows(fm), config);
  auto out = apply_preprocess(state, fm);
  // std of {2,4,6,8} is sqrt(5); values scaled but not centered.
  const double sd = std::sqrt(5.0);
  for (size_t r = 0; r < 4; ++r)
    CHECK(out.at(r, 0) == doctest::Approx(fm.at(r, 0) / sd).epsilon(1e-12));
}

TEST_CASE("missing values are imputed with the train median") {
  auto fm = make_matrix({"X"}, 5, {1.0, 2.0, kMissing, 4.0, 100.0});
  std::vector<size_t> train = {0, 1, 3};  // median of {1,2,4} = 2
  auto state = fit_preprocess(fm, train, {});
  REQUIRE(state.scales.size() == 1);
  CHECK(state.scales[0].median == doctest::Approx(2.0));
  auto out = apply_preprocess(state, fm);
  // Row 2 was imputed to 2.0 before scaling; rows 1 and 2 now agree.
  CHECK(out.at(2, 0) == doctest::Approx(out.at(1, 0)));
}

TEST_CASE("apply_preprocess validates the column set") {
  auto fm = make_matrix({"A", "B"}, 3, {1, 2, 3, 4, 5, 6});
  auto state = fit_preprocess(fm, all_rows(fm), {});
  SUBCASE("missing fitted column") {
    auto narrow = make_matrix({"A"}, 3, {1, 3, 5});
    CHECK_THROWS_AS(apply_preprocess(state, narrow), DataError);
  }
  SUBCASE("unknown extra column") {
    auto wide = make_matrix({"A", "B", "C"}, 3, {1, 2, 0, 3, 4, 0, 5, 6, 0});
    CHECK_THROWS_AS(apply_preprocess(state, wide), DataError);
  }
}

TEST_CASE("preprocess state serializes and round-trips") {
  auto fm = make_matrix({"AMT_A", "B"}, 4, {1, 2, 10, 4, 100, 6, 1000, 8});
  auto state = fit_preprocess(fm, all_rows(fm), {});
  auto text = state.to_json();
  auto back = PreprocessState::from_json(text);
  REQUIRE(back.scales.size() == state.scales.size());
  for (size_t i = 0; i < state.scales.size(); ++i) {
    CHECK(back.scales[i].name == state.scales[i].name);
    CHECK(back.scales[i].median == state.scales[i].median);
    CHECK(back.scales[i].log_robust == state.scales[i].log_robust);
    CHECK(back.scales[i].center == state.scales[i].center);
    CHECK(back.scales[i].scale == state.scales[i].scale);
  }
  CHECK(back.config.center_standardized == state.config.center_standardized);
}

// ---------------------------------------------------------------------------
// PCA

TEST_CASE("rank-2 matrix needs exactly 2 components at target 0.95") {
  Rng rng(5);
  const size_t n = 60, m = 6;
  // X = u * a^T + v * b^T: exactly rank 2.
  std::vector<double> a = {1, -2, 0.5, 3, 1, 0}, bvec = {0, 1, 1, -1, 2, 0.5};
  std::vector<double> values(n * m, 0.0);
  for (size_t r = 0; r < n; ++r) {
    const double u = rng.normal(), v = rng.normal();
    for (size_t c = 0; c < m; ++c) values[r * m + c] = u * a[c] + v * bvec[c];
  }
  auto fm = make_matrix({"C0", "C1", "C2", "C3", "C4", "C5"}, n, values);
  auto pca = fit_pca(fm, all_rows(fm), 0.95);
  CHECK(pca.n_components == 2);
}

TEST_CASE("pca spectrum matches an independent eigensolver within 1e-8") {
  Rng rng(23);
  const size_t n = 50, m = 10;
  std::vector<double> values(n * m);
  for (auto& v : values) v = rng.normal();
  std::vector<std::string> names;
  for (size_t c = 0; c < m; ++c) names.push_back("C" + std::to_string(c));
  auto fm = make_matrix(names, n, values);
  auto pca = fit_pca(fm, all_rows(fm), 1.0);

  // Oracle: dense self-adjoint eigensolver on the same covariance.
  Eigen::MatrixXd X(n, m);
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < m; ++c) X(r, c) = fm.at(r, c);
  Eigen::RowVectorXd mean = X.colwise().mean();
  Eigen::MatrixXd centered = X.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  REQUIRE(solver.info() == Eigen::Success);

  REQUIRE(pca.eigenvalues.size() == m);
  for (size_t k = 0; k < m; ++k) {
    const double oracle = solver.eigenvalues()(m - 1 - k);  // ascending -> descending
    CHECK(pca.eigenvalues[k] == doctest::Approx(oracle).epsilon(1e-8));
  }

  // Components orthonormal within 1e-8.
  for (size_t i = 0; i < pca.n_components; ++i) {
    for (size_t j = i; j < pca.n_components; ++j) {
      double dot = 0.0;
      for (size_t c = 0; c < m; ++c)
        dot += pca.components[i * m + c] * pca.components[j * m + c];
      CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));
    }
  }
}

TEST_CASE("pca reconstruction error is non-increasing in k") {
  Rng rng(29);
  const size_t n = 40, m = 8;
  std::vector<double> values(n * m);
  for (auto& v : values) v = rng.normal() + 0.3 * rng.normal();
  std::vector<std::string> names;
  for (size_t c = 0; c < m; ++c) names.push_back("C" + std::to_string(c));
  auto fm = make_matrix(names, n, values);
  auto full = fit_pca(fm, all_rows(fm), 1.0);

  double prev_err = std::numeric_limits<double>::infinity();
  for (size_t k = 1; k <= m; ++k) {
    PcaState cut = full;
    cut.n_components = k;
    cut.components.assign(full.components.begin(), full.components.begin() + k * m);
    auto proj = apply_pca(cut, fm);
    // Reconstruction: mean + proj * components.
    double err = 0.0;
    for (size_t r = 0; r < n; ++r) {
      for (size_t c = 0; c < m; ++c) {
        double rec = cut.mean[c];
        for (size_t j = 0; j < k; ++j) rec += proj.at(r, j) * cut.components[j * m + c];
        err += (fm.at(r, c) - rec) * (fm.at(r, c) - rec);
      }
    }
    CHECK(err <= prev_err + 1e-9);
    prev_err = err;
  }
}

TEST_CASE("pca input validation") {
  auto fm = make_matrix({"A"}, 3, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(fit_pca(fm, all_rows(fm), 0.0), ConfigError);
  CHECK_THROWS_AS(fit_pca(fm, all_rows(fm), 1.5), ConfigError);
  auto with_missing = make_matrix({"A"}, 3, {1.0, kMissing, 3.0});
  CHECK_THROWS_AS(fit_pca(with_missing, all_rows(with_missing), 0.95), DataError);
  auto zero = make_matrix({"A"}, 3, {2.0, 2.0, 2.0});
  CHECK_THROWS_AS(fit_pca(zero, all_rows(zero), 0.95), DataError);
}

// ---------------------------------------------------------------------------
// Correlation pruning and twins

TEST_CASE("correlated columns are pruned, keeping the earlier one") {
  Rng rng(41);
  const size_t n = 100;
  std::vector<double> values;
  for (size_t r = 0; r < n; ++r) {
    const double x = rng.normal();
    values.push_back(x);
    values.push_back(2.0 * x + 1.0);   // exact affine copy of A
    values.push_back(rng.normal());    // independent
  }
  auto fm = make_matrix({"A", "A_COPY", "C"}, n, values);
  auto dropped = correlated_columns(fm, all_rows(fm), 0.98);
  REQUIRE(dropped.size() == 1);
  CHECK(dropped[0] == "A_COPY");
}

TEST_CASE("log1p twins equal the signed transform") {
  auto fm = make_matrix({"X"}, 3, {0.0, std::exp(1.0) - 1.0, -3.0});
  add_log1p_twins(fm, {"X"});
  const int tw = fm.col_index("LOG1P_X");
  REQUIRE(tw >= 0);
  CHECK(fm.at(0, tw) == 0.0);
  CHECK(fm.at(1, tw) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fm.at(2, tw) == doctest::Approx(-std::log1p(3.0)).epsilon(1e-12));
}

TEST_CASE("heavy-tailed detection flags the lognormal column only") {
  Rng rng(43);
  const size_t n = 500;
  std::vector<double> values;
  for (size_t r = 0; r < n; ++r) {
    values.push_back(std::exp(2.5 * rng.normal()));  // HEAVY
    values.push_back(rng.normal());                  // LIGHT
  }
  auto fm = make_matrix({"HEAVY", "LIGHT"}, n, values);
  auto heavy = heavy_tailed_columns(fm, all_rows(fm), 5.0);
  REQUIRE(heavy.size() == 1);
  CHECK(heavy[0] == "HEAVY");
}

// ---------------------------------------------------------------------------
// End-to-end: pipeline over a synthetic dataset holds the invariants

TEST_CASE("feature pipeline runs clean over generated data") {
  SynthConfig cfg;
  cfg.n_customers = 400;
  auto ds = generate_synthetic(cfg, 9);
  auto fm = engineer_features(ds);
  CHECK(fm.n_rows() == 400);
  CHECK(fm.n_cols() > 20);

  auto labels = ds.labels();
  std::vector<size_t> train;
  for (size_t r = 0; r < 300; ++r) train.push_back(r);

  target_encode(fm, "CODE_GENDER", labels, train);
  target_encode(fm, "OCCUPATION_TYPE", labels, train);

  auto state = fit_preprocess(fm, train, {});
  // The 90%-missing synthetic column must be dropped.
  bool dropped_sparse = false;
  for (const auto& name : state.dropped_columns) dropped_sparse |= name == "SPARSE_EXT_RATIO";
  CHECK(dropped_sparse);

  auto out = apply_preprocess(state, fm);
  for (size_t r = 0; r < out.n_rows(); ++r)
    for (size_t c = 0; c < out.n_cols(); ++c) REQUIRE_FALSE(is_missing(out.at(r, c)));

  auto pca = fit_pca(out, train, 0.95);
  CHECK(pca.n_components >= 1);
  CHECK(pca.n_components <= out.n_cols());
  auto proj = apply_pca(pca, out);
  CHECK(proj.n_cols() == pca.n_components);
  CHECK(proj.n_rows() == 400);
}
