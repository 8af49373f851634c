#include "pdtb/harness.hpp"

int main(int argc, char** argv) { return pdtb::run_cli(argc, argv); }
