#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "cpn/cpn.h"

int main(int argc, char** argv) {
  cpn_set_log_level("warn");
  doctest::Context ctx;
  ctx.applyCommandLine(argc, argv);
  return ctx.run();
}
