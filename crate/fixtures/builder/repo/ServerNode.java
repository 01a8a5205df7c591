public class ServerNode {
    private final String ip;
    private final int port;

    private ServerNode(String ip, int port) {
        this.ip = ip;
        this.port = port;
    }

    public static Builder newServerNode() {
        return new Builder();
    }

    public static class Builder {
        private String ip;
        private int port;

        public Builder withIp(String ip) {
            this.ip = ip;
            return this;
        }

        public Builder withPort(int port) {
            this.port = port;
            return this;
        }

        public ServerNode build() {
            return new ServerNode(ip, port);
        }
    }
}
