#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "probekit/kernels.hpp"

int main(int argc, char** argv) {
    probekit::kernels::init_from_env();
    doctest::Context context;
    context.applyCommandLine(argc, argv);
    return context.run();
}
