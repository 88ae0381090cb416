#include "cli.hpp"

int main(int argc, char** argv) { return msadgn::cli::run({argv + 1, argv + argc}); }
