#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "spindle/stages.hpp"
#include "spindle/subprocess.hpp"
#include "test_remote.hpp"

int main(int argc, char** argv) {
  spindle::stages::register_builtin_remote_functions();
  spindle_test::register_test_remote_functions();
  // Worker processes re-execute this binary; serve the protocol and exit.
  if (spindle::maybe_run_worker(argc, argv)) return 0;

  doctest::Context ctx;
  ctx.applyCommandLine(argc, argv);
  return ctx.run();
}
