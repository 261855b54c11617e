#include <gtest/gtest.h>

#include "pcf/checks.hpp"

using namespace pcf;
using namespace pcf::checks;

TEST(CheckReport, StatusAndText) {
  CheckReport r{"demo", {{"small", 1e-13, 1e-12}, {"exits", 0.3, 0.0, true}}};
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.to_text(), "suite,check,worst,tolerance,status,note\ndemo,small,1e-13,<1e-12,PASS,\n"
                         "demo,exits,0.3,>0,PASS,\n");
  r.rows[0].vetoed = true;
  EXPECT_FALSE(r.passed());
  r.rows[0].vetoed = false;
  r.rows.push_back({"big", 2.0, 1.0});
  EXPECT_FALSE(r.passed());
  EXPECT_DOUBLE_EQ(r.worst_of("b"), 2.0);
}

TEST(Suites, AllPass) {
  for (const char* name : {"oracle", "gradcheck", "invariance"}) {
    const CheckReport r = run_suite(name, 1);
    EXPECT_TRUE(r.passed()) << r.to_text();
    EXPECT_GT(r.rows.size(), 3u);
  }
  EXPECT_THROW(run_suite("speed"), ConfigError);
}
