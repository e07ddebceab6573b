import sys

import fcca_rewardgen.util as util

def main():
    options = util.build_default_options()
    sys.exit(util.dispatch_from_arguments(sys.argv[1:], options))

if __name__ == "__main__":
    main()
