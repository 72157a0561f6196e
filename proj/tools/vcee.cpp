#include "vcee/cli.hpp"

int main(int argc, char** argv) { return vcee::cli::run(argc, argv); }
