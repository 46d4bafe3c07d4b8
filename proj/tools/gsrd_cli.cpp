#include "gsrd/cli.hpp"

int main(int argc, char** argv) { return gsrd::run_cli(argc, argv); }
