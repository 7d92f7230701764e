#include "mrc/cli.hpp"

int main(int argc, char** argv) { return mrc::cli::run(argc, argv); }
