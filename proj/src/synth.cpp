#include "relrisk/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "relrisk/ingest.hpp"

namespace relrisk {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

size_t poisson(Rng& rng, double mean) {
  // Knuth's product method; fine for the small means used here.
  const double limit = std::exp(-mean);
  size_t k = 0;
  double p = 1.0;
  do {
    p *= rng.uniform01();
    ++k;
  } while (p > limit);
  return k - 1;
}

struct Builder {
  Table table;

  explicit Builder(const TableSchema& ts) {
    table.name = ts.name;
    // add() hands out references into this vector, so it must never grow
    // past the reserved capacity.
    table.columns.reserve(32);
  }

  Column& add(const std::string& name, ColumnKind kind) {
    if (table.columns.size() == table.columns.capacity())
      throw std::logic_error("synthetic table builder: column capacity exceeded");
    Column col;
    col.name = name;
    col.kind = kind;
    table.columns.push_back(std::move(col));
    return table.columns.back();
  }
};

}  // namespace

RelationalDataset generate_synthetic(const SynthConfig& config, uint64_t seed) {
  if (config.n_customers < 10) throw ConfigError("synthetic: n_customers must be >= 10");
  if (config.base_rate < 0.0 || config.base_rate > 1.0)
    throw ConfigError("synthetic: base_rate must be in [0,1]");
  for (double m : {config.beta, config.mean_bureau, config.mean_prev, config.mean_installments,
                   config.mean_pos, config.mean_card}) {
    if (m < 0.0) throw ConfigError("synthetic: rates must be non-negative");
  }

  RelationalDataset ds;
  ds.schema = default_schema();
  const size_t n = config.n_customers;

  Builder app(ds.table_schema("application"));
  auto& app_id = app.add("SK_ID_CURR", ColumnKind::key);
  auto& target = app.add("TARGET", ColumnKind::numeric);
  auto& income = app.add("AMT_INCOME_TOTAL", ColumnKind::numeric);
  auto& credit = app.add("AMT_CREDIT", ColumnKind::numeric);
  auto& annuity = app.add("AMT_ANNUITY", ColumnKind::numeric);
  auto& fam = app.add("CNT_FAM_MEMBERS", ColumnKind::numeric);
  auto& days_birth = app.add("DAYS_BIRTH", ColumnKind::numeric);
  auto& days_emp = app.add("DAYS_EMPLOYED", ColumnKind::numeric);
  auto& ext1 = app.add("EXT_SCORE_1", ColumnKind::numeric);
  auto& ext2 = app.add("EXT_SCORE_2", ColumnKind::numeric);
  auto& region = app.add("REGION_RATING", ColumnKind::numeric);
  auto& noise1 = app.add("NOISE_BASE_1", ColumnKind::numeric);
  auto& noise2 = app.add("NOISE_BASE_2", ColumnKind::numeric);
  auto& heavy_missing = app.add("SPARSE_EXT_RATIO", ColumnKind::numeric);
  auto& gender = app.add("CODE_GENDER", ColumnKind::categorical);
  auto& education = app.add("NAME_EDUCATION_TYPE", ColumnKind::categorical);
  auto& occupation = app.add("OCCUPATION_TYPE", ColumnKind::categorical);
  auto& age_group = app.add("AGE_GROUP", ColumnKind::categorical);

  Builder bureau(ds.table_schema("bureau"));
  auto& bu_id = bureau.add("SK_ID_BUREAU", ColumnKind::key);
  auto& bu_curr = bureau.add("SK_ID_CURR", ColumnKind::key);
  auto& bu_sum = bureau.add("AMT_CREDIT_SUM", ColumnKind::numeric);
  auto& bu_debt = bureau.add("AMT_CREDIT_SUM_DEBT", ColumnKind::numeric);
  auto& bu_overdue = bureau.add("CREDIT_DAY_OVERDUE", ColumnKind::numeric);
  auto& bu_days = bureau.add("DAYS_CREDIT", ColumnKind::numeric);

  Builder prev(ds.table_schema("previous_application"));
  auto& pv_id = prev.add("SK_ID_PREV", ColumnKind::key);
  auto& pv_curr = prev.add("SK_ID_CURR", ColumnKind::key);
  auto& pv_app_amt = prev.add("AMT_APPLICATION", ColumnKind::numeric);
  auto& pv_credit = prev.add("AMT_CREDIT", ColumnKind::numeric);
  auto& pv_cnt = prev.add("CNT_PAYMENT", ColumnKind::numeric);

  Builder inst(ds.table_schema("installments_payments"));
  auto& in_prev = inst.add("SK_ID_PREV", ColumnKind::key);
  auto& in_curr = inst.add("SK_ID_CURR", ColumnKind::key);
  auto& in_num = inst.add("NUM_INSTALMENT_NUMBER", ColumnKind::numeric);
  auto& in_amt = inst.add("AMT_INSTALMENT", ColumnKind::numeric);
  auto& in_pay = inst.add("AMT_PAYMENT", ColumnKind::numeric);
  auto& in_due = inst.add("DAYS_INSTALMENT", ColumnKind::numeric);
  auto& in_paid = inst.add("DAYS_ENTRY_PAYMENT", ColumnKind::numeric);

  Builder pos(ds.table_schema("pos_cash_balance"));
  auto& po_prev = pos.add("SK_ID_PREV", ColumnKind::key);
  auto& po_curr = pos.add("SK_ID_CURR", ColumnKind::key);
  auto& po_month = pos.add("MONTHS_BALANCE", ColumnKind::numeric);
  auto& po_cnt = pos.add("CNT_INSTALMENT", ColumnKind::numeric);
  auto& po_future = pos.add("CNT_INSTALMENT_FUTURE", ColumnKind::numeric);
  auto& po_dpd = pos.add("SK_DPD", ColumnKind::numeric);

  Builder card(ds.table_schema("credit_card_balance"));
  auto& cc_prev = card.add("SK_ID_PREV", ColumnKind::key);
  auto& cc_curr = card.add("SK_ID_CURR", ColumnKind::key);
  auto& cc_month = card.add("MONTHS_BALANCE", ColumnKind::numeric);
  auto& cc_balance = card.add("AMT_BALANCE", ColumnKind::numeric);
  auto& cc_limit = card.add("AMT_CREDIT_LIMIT_ACTUAL", ColumnKind::numeric);
  auto& cc_dpd = card.add("SK_DPD", ColumnKind::numeric);

  Rng rng(mix_seed(seed, 1));
  int64_t next_bureau_id = 5000001;
  int64_t next_prev_id = 1000001;
  std::vector<double> linear_score(n);

  const char* educations[] = {"Secondary", "Higher", "Incomplete higher", "Lower secondary"};
  const double education_probs[] = {0.70, 0.22, 0.05, 0.03};
  const char* occupations[] = {"Laborers", "Sales", "Core staff", "Managers", "Drivers",
                               "Accountants"};

  for (size_t i = 0; i < n; ++i) {
    const int64_t customer = 100001 + static_cast<int64_t>(i);
    app_id.keys.push_back(customer);

    const double z_income = rng.normal();
    const double z_credit = rng.normal();
    const double amt_income = std::round(40000.0 * std::exp(0.6 * z_income));
    const double amt_credit = std::round(150000.0 * std::exp(0.45 * z_credit + 0.25 * z_income));
    income.nums.push_back(amt_income);
    credit.nums.push_back(amt_credit);
    annuity.nums.push_back(rng.uniform01() < 0.05
                               ? kMissing
                               : std::round(amt_credit * (0.04 + 0.02 * rng.uniform01())));
    fam.nums.push_back(1.0 + static_cast<double>(rng.below(5)));

    const double age_years = 21.0 + 47.0 * rng.uniform01();
    days_birth.nums.push_back(-std::round(age_years * 365.25));
    const double z_emp = rng.normal();
    days_emp.nums.push_back(-std::round(400.0 + 1400.0 * std::exp(0.5 * z_emp)));

    const double u1 = rng.normal();
    const double u2 = rng.normal();
    ext1.nums.push_back(u1);
    ext2.nums.push_back(u2);
    region.nums.push_back(1.0 + static_cast<double>(rng.below(3)));
    noise1.nums.push_back(rng.normal());
    noise2.nums.push_back(rng.normal());
    heavy_missing.nums.push_back(rng.uniform01() < 0.90 ? kMissing : rng.uniform01());

    const bool male = rng.uniform01() < 0.34;
    gender.intern(male ? "M" : "F");
    {
      const double r = rng.uniform01();
      double acc = 0.0;
      size_t pick = 0;
      for (size_t e = 0; e < 4; ++e) {
        acc += education_probs[e];
        if (r < acc) {
          pick = e;
          break;
        }
      }
      education.intern(educations[pick]);
    }
    occupation.intern(rng.uniform01() < 0.05 ? "" : occupations[rng.below(6)]);
    const int age_bucket = age_years < 32.0 ? 0 : (age_years < 48.0 ? 1 : 2);
    age_group.intern(std::to_string(age_bucket));

    // Tabular risk: linear terms plus |z_emp| and a pairwise interaction
    // that a linear model cannot represent.
    const double z_ratio = (std::log(amt_credit / amt_income) - 1.3) / 0.55;
    double s_tab = 0.8 * u1 + 0.6 * u2 + 0.45 * z_ratio + 0.7 * (std::abs(z_emp) - 0.7979) +
                   0.5 * u1 * u2;
    s_tab += age_bucket == 0 ? 0.25 : (age_bucket == 2 ? -0.15 : 0.0);
    s_tab += male ? 0.12 : 0.0;

    // Bureau records: latent factors z1, z2 observed through log-linear
    // columns; record risk is tanh(z1)*tanh(z2).
    const size_t n_bureau = poisson(rng, config.mean_bureau);
    double risk_sum = 0.0;
    double risk_max = 0.0;
    for (size_t b = 0; b < n_bureau; ++b) {
      bu_id.keys.push_back(next_bureau_id++);
      bu_curr.keys.push_back(customer);
      const double z1 = rng.normal();
      const double z2 = rng.normal();
      const double z3 = rng.normal();
      bu_sum.nums.push_back(std::round(80000.0 * std::exp(0.7 * z1)));
      bu_debt.nums.push_back(std::round(30000.0 * std::exp(0.7 * z2)));
      bu_overdue.nums.push_back(z3 > 1.2 ? std::round(30.0 * std::exp(z3 - 1.2)) : 0.0);
      bu_days.nums.push_back(-std::round(30.0 + 2900.0 * rng.uniform01()));
      const double rho = std::tanh(z1) * std::tanh(z2);
      risk_sum += rho;
      if (b == 0 || rho > risk_max) risk_max = rho;
    }
    const double neighbor_risk =
        n_bureau == 0 ? 0.0 : 0.5 * (risk_sum / static_cast<double>(n_bureau)) + 0.5 * risk_max;

    const size_t n_prev = poisson(rng, config.mean_prev);
    for (size_t p = 0; p < n_prev; ++p) {
      const int64_t prev_key = next_prev_id++;
      pv_id.keys.push_back(prev_key);
      pv_curr.keys.push_back(customer);
      const double amt_app = std::round(60000.0 * std::exp(0.6 * rng.normal()));
      pv_app_amt.nums.push_back(amt_app);
      pv_credit.nums.push_back(std::round(amt_app * (0.9 + 0.2 * rng.uniform01())));
      const double payments[] = {6.0, 12.0, 24.0, 36.0};
      pv_cnt.nums.push_back(payments[rng.below(4)]);
      const double monthly = amt_app / 12.0;

      const size_t n_inst = poisson(rng, config.mean_installments);
      for (size_t k = 0; k < n_inst; ++k) {
        in_prev.keys.push_back(prev_key);
        in_curr.keys.push_back(customer);
        in_num.nums.push_back(static_cast<double>(k + 1));
        const double due_amt = std::round(monthly * (0.9 + 0.2 * rng.uniform01()));
        in_amt.nums.push_back(due_amt);
        const double ratio = rng.uniform01() < 0.8 ? 1.0 : 0.3 + 0.7 * rng.uniform01();
        in_pay.nums.push_back(rng.uniform01() < 0.02 ? kMissing : std::round(due_amt * ratio));
        const double due_day = -30.0 * static_cast<double>(k + 1);
        in_due.nums.push_back(due_day);
        const bool late = rng.uniform01() < 0.25;
        in_paid.nums.push_back(due_day + (late ? 1.0 + std::floor(20.0 * rng.uniform01())
                                               : -std::floor(10.0 * rng.uniform01())));
      }

      const size_t n_pos = poisson(rng, config.mean_pos);
      for (size_t k = 0; k < n_pos; ++k) {
        po_prev.keys.push_back(prev_key);
        po_curr.keys.push_back(customer);
        po_month.nums.push_back(-static_cast<double>(k + 1));
        const double cnt = 6.0 + static_cast<double>(rng.below(31));
        po_cnt.nums.push_back(cnt);
        po_future.nums.push_back(std::floor(cnt * rng.uniform01()));
        po_dpd.nums.push_back(rng.uniform01() < 0.9 ? 0.0
                                                    : std::floor(15.0 * rng.uniform01()) + 1.0);
      }

      const size_t n_card = poisson(rng, config.mean_card);
      for (size_t k = 0; k < n_card; ++k) {
        cc_prev.keys.push_back(prev_key);
        cc_curr.keys.push_back(customer);
        cc_month.nums.push_back(-static_cast<double>(k + 1));
        const double limits[] = {45000.0, 90000.0, 180000.0, 270000.0};
        const double limit = rng.uniform01() < 0.02 ? 0.0 : limits[rng.below(4)];
        cc_limit.nums.push_back(limit);
        cc_balance.nums.push_back(std::round(limit * sigmoid(rng.normal() - 0.5)));
        cc_dpd.nums.push_back(rng.uniform01() < 0.92 ? 0.0
                                                     : std::floor(10.0 * rng.uniform01()) + 1.0);
      }
    }

    linear_score[i] = s_tab + config.beta * neighbor_risk;
  }

  // Intercept chosen so the mean default probability hits base_rate.
  double lo = -30.0, hi = 30.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    double mean_p = 0.0;
    for (double s : linear_score) mean_p += sigmoid(mid + s);
    mean_p /= static_cast<double>(n);
    (mean_p < config.base_rate ? lo : hi) = mid;
  }
  const double intercept = 0.5 * (lo + hi);

  Rng label_rng(mix_seed(seed, 999));
  for (size_t i = 0; i < n; ++i) {
    target.nums.push_back(label_rng.uniform01() < sigmoid(intercept + linear_score[i]) ? 1.0
                                                                                       : 0.0);
  }

  for (Builder* b : {&app, &bureau, &prev, &inst, &pos, &card}) {
    b->table.n_rows = b->table.columns.front().size();
    ds.tables.emplace(b->table.name, std::move(b->table));
  }

  // Declare every generated column in the schema so a CSV round-trip
  // reloads each column with the same kind.
  for (auto& ts : ds.schema) {
    const Table& t = ds.table(ts.name);
    ts.columns.clear();
    for (const auto& col : t.columns) ts.columns.push_back({col.name, col.kind});
  }
  return ds;
}

}  // namespace relrisk
